use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

/// Failures raised by the differentiation engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("primitive `{0}` is not registered")]
    UnregisteredPrimitive(String),
    #[error("primitive `{name}` expects {expected} operand(s), got {got}")]
    Arity {
        name: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced by primitive `{primitive}` at node {node}")]
    NonFinite { primitive: &'static str, node: usize },
    #[error("seed index {seed} out of range for {inputs} input(s)")]
    SeedOutOfRange { seed: usize, inputs: usize },
    #[error("expected {expected} input(s), got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("backward requires a scalar output, got a {rows}x{cols} tensor")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),
}

/// Errors surfaced by the surrogate, models, oracle, trainer and fitter.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite residual at collocation point {index} (t = {t})")]
    NonFiniteResidual { index: usize, t: f64 },
    #[error("integrator state left the unit interval at t = {t}: {state:?}")]
    StateOutOfRange { t: f64, state: Vec<f64> },
    #[error("non-finite loss at iteration {iteration}")]
    NanLoss { iteration: usize },
    #[error("training diverged at iteration {iteration}: loss {loss:e}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("observations outside the trained time range {range:?}: {points:?}")]
    OutOfRange { range: (f64, f64), points: Vec<(usize, f64)> },
    #[error("nothing to fit: every quantity is pinned")]
    AllPinned,
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diff(DiffError::NonFinite { .. })
                | Error::Diff(DiffError::NonFiniteGradient(_))
                | Error::NonFiniteResidual { .. }
                | Error::NanLoss { .. }
                | Error::Diverged { .. }
                | Error::StateOutOfRange { .. }
        )
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
