//! SIR and SIRP compartmental systems in normalized form.
//!
//! Compartments are fractions of the total population, so the infection term
//! is `beta * S * I`. SIRP appends a passive compartment `P` with `dP/dt = 0`.
//! The susceptible fraction is never independent: `S0 = 1 - (I0 + R0 [+ P0])`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diff::{DualVar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::net::SurrogateNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelId {
    Sir,
    Sirp,
}

impl ModelId {
    pub fn name(self) -> &'static str {
        match self {
            ModelId::Sir => "sir",
            ModelId::Sirp => "sirp",
        }
    }

    pub fn parse(s: &str) -> Option<ModelId> {
        match s.to_ascii_lowercase().as_str() {
            "sir" => Some(ModelId::Sir),
            "sirp" => Some(ModelId::Sirp),
            _ => None,
        }
    }
}

impl core::fmt::Display for ModelId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Infection and recovery rates, in model time units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVec {
    pub beta: f64,
    pub gamma: f64,
}

impl ParamVec {
    pub fn new(beta: f64, gamma: f64) -> Self {
        Self { beta, gamma }
    }

    pub fn as_array(self) -> [f64; 2] {
        [self.beta, self.gamma]
    }
}

/// Basic reproduction number `beta / gamma`.
pub fn basic_reproduction_number(theta: ParamVec) -> Result<f64> {
    if !(theta.gamma > 0.0) {
        return Err(Error::Domain(format!(
            "recovery rate must be positive, got {}",
            theta.gamma
        )));
    }
    Ok(theta.beta / theta.gamma)
}

/// Arithmetic needed to evaluate a vector field. Implemented for plain
/// floats and for tape columns so the oracle and the training loss share one
/// definition of the right-hand side.
pub trait FieldOps {
    type V: Copy;
    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    fn zero_like(&mut self, a: Self::V) -> Self::V;
}

/// Plain `f64` evaluation.
pub struct Scalar;

impl FieldOps for Scalar {
    type V = f64;
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    fn zero_like(&mut self, _a: f64) -> f64 {
        0.0
    }
}

impl FieldOps for Tape {
    type V = Var;
    fn add(&mut self, a: Var, b: Var) -> Var {
        Tape::add(self, a, b)
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        Tape::sub(self, a, b)
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        Tape::mul(self, a, b)
    }
    fn neg(&mut self, a: Var) -> Var {
        Tape::neg(self, a)
    }
    fn zero_like(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape();
        self.constant(Tensor::zeros(r, c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDef {
    pub id: ModelId,
}

const SIR_COMPARTMENTS: &[&str] = &["S", "I", "R"];
const SIRP_COMPARTMENTS: &[&str] = &["S", "I", "R", "P"];
const SIR_FREE: &[&str] = &["I0", "R0"];
const SIRP_FREE: &[&str] = &["I0", "R0", "P0"];
const PARAMS: &[&str] = &["beta", "gamma"];

impl ModelDef {
    pub const SIR: ModelDef = ModelDef { id: ModelId::Sir };
    pub const SIRP: ModelDef = ModelDef { id: ModelId::Sirp };

    pub fn new(id: ModelId) -> Self {
        Self { id }
    }

    pub fn compartments(&self) -> &'static [&'static str] {
        match self.id {
            ModelId::Sir => SIR_COMPARTMENTS,
            ModelId::Sirp => SIRP_COMPARTMENTS,
        }
    }

    pub fn params(&self) -> &'static [&'static str] {
        PARAMS
    }

    /// Initial conditions the fitter may adjust; they are compartments
    /// `1..` in order. `S0` is derived.
    pub fn free_init(&self) -> &'static [&'static str] {
        match self.id {
            ModelId::Sir => SIR_FREE,
            ModelId::Sirp => SIRP_FREE,
        }
    }

    pub fn n_compartments(&self) -> usize {
        self.compartments().len()
    }

    pub fn n_free(&self) -> usize {
        self.free_init().len()
    }

    pub fn n_params(&self) -> usize {
        PARAMS.len()
    }

    /// Surrogate input width: time, free initial conditions, parameters.
    pub fn input_dim(&self) -> usize {
        1 + self.n_free() + self.n_params()
    }

    /// Names of every fittable quantity: free initial conditions then parameters.
    pub fn quantities(&self) -> Vec<&'static str> {
        self.free_init().iter().chain(PARAMS).copied().collect()
    }

    pub fn compartment_index(&self, name: &str) -> Option<usize> {
        self.compartments().iter().position(|c| c.eq_ignore_ascii_case(name))
    }

    /// Full normalized state from the free coordinates.
    pub fn full_state(&self, free: &[f64]) -> Vec<f64> {
        assert_eq!(free.len(), self.n_free(), "free coordinate count");
        let s0 = 1.0 - free.iter().sum::<f64>();
        let mut z = Vec::with_capacity(self.n_compartments());
        z.push(s0);
        z.extend_from_slice(free);
        z
    }

    /// `dz/dt = g(z; theta)` written once over any [`FieldOps`].
    pub fn vector_field<O: FieldOps>(&self, ops: &mut O, z: &[O::V], theta: &[O::V]) -> Vec<O::V> {
        let (s, i) = (z[0], z[1]);
        let (beta, gamma) = (theta[0], theta[1]);
        let bs = ops.mul(beta, s);
        let infection = ops.mul(bs, i);
        let recovery = ops.mul(gamma, i);
        let ds = ops.neg(infection);
        let di = ops.sub(infection, recovery);
        let mut out = vec![ds, di, recovery];
        if self.id == ModelId::Sirp {
            out.push(ops.zero_like(z[3]));
        }
        out
    }

    pub fn rhs(&self, z: &[f64], theta: ParamVec) -> Vec<f64> {
        self.vector_field(&mut Scalar, z, &theta.as_array())
    }

    /// Checks that `z` is a normalized state for this model.
    pub fn validate_state(&self, z: &[f64], tol: f64) -> Result<()> {
        if z.len() != self.n_compartments() {
            return Err(Error::Shape(format!(
                "{} state has {} compartments, got {}",
                self.id,
                self.n_compartments(),
                z.len()
            )));
        }
        if z.iter().any(|&v| !(v >= -tol && v <= 1.0 + tol)) {
            return Err(Error::Domain(format!("state components must lie in [0, 1]: {z:?}")));
        }
        let sum: f64 = z.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::Domain(format!("state must sum to 1, sums to {sum}")));
        }
        Ok(())
    }
}

pub fn sir_rhs(z: [f64; 3], theta: ParamVec) -> [f64; 3] {
    let v = ModelDef::SIR.rhs(&z, theta);
    [v[0], v[1], v[2]]
}

pub fn sirp_rhs(z: [f64; 4], theta: ParamVec) -> [f64; 4] {
    let v = ModelDef::SIRP.rhs(&z, theta);
    [v[0], v[1], v[2], v[3]]
}

/// Residual-loss inputs: one row per collocation point.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationBatch {
    pub times: Vec<f64>,
    /// `n x n_free` free initial conditions.
    pub init: Tensor,
    /// `n x n_params`.
    pub params: Tensor,
}

impl CollocationBatch {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `n x n_compartments` full initial states.
    pub fn full_init(&self, model: &ModelDef) -> Tensor {
        let n = self.len();
        Tensor::from_fn(n, model.n_compartments(), |i, j| {
            let free = self.init.row_slice(i);
            if j == 0 {
                1.0 - free.iter().sum::<f64>()
            } else {
                free[j - 1]
            }
        })
    }
}

/// Records the mean squared ODE residual of `net` over `batch`.
///
/// `weights` are the net's layer variables on `tape` (trainable or frozen).
pub fn record_residual_loss(
    tape: &mut Tape,
    model: &ModelDef,
    net: &SurrogateNet,
    weights: &[(Var, Var)],
    batch: &CollocationBatch,
) -> Var {
    let n = batch.len();
    let d = model.n_compartments();
    let raw = net.batch_inputs(&batch.times, &batch.init, &batch.params);
    let (x, dx) = net.scaling().scale_batch(&raw);
    let x = tape.constant(x);
    let dx = tape.constant(dx);
    let input = DualVar {
        value: x,
        tangent: Some(dx),
    };
    let z0 = tape.constant(batch.full_init(model));
    let (zhat, dzhat) = net.record_constrained(tape, weights, &batch.times, DualVar::constant(z0), input);

    let cols: Vec<Var> = (0..d).map(|k| tape.column(zhat, k)).collect();
    let theta: Vec<Var> = (0..model.n_params())
        .map(|k| tape.constant(Tensor::column(batch.params.column_values(k))))
        .collect();
    let g = model.vector_field(tape, &cols, &theta);
    let mut total: Option<Var> = None;
    for (k, gk) in g.into_iter().enumerate() {
        let dk = tape.column(dzhat, k);
        let r = tape.sub(dk, gk);
        let r2 = tape.square(r);
        total = Some(match total {
            Some(t) => tape.add(t, r2),
            None => r2,
        });
    }
    let s = tape.sum_all(total.expect("at least one compartment"));
    tape.scale(s, 1.0 / n as f64)
}

/// Mean over the batch of `sum_k (dz_k/dt - g_k(z, theta))^2`.
pub fn residual_loss(model: &ModelDef, net: &SurrogateNet, batch: &CollocationBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("collocation batch is empty".into()));
    }
    net.check_model(model)?;
    let mut tape = Tape::new();
    let weights = net.register(&mut tape, false);
    let loss = record_residual_loss(&mut tape, model, net, &weights, batch);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        let index = (0..batch.len())
            .find(|&i| {
                let free = batch.init.row_slice(i);
                let theta = ParamVec::new(batch.params.get(i, 0), batch.params.get(i, 1));
                let z0 = model.full_state(free);
                let ok = net
                    .residual_at(model, batch.times[i], &z0, theta)
                    .map(|r| r.iter().all(|v| v.is_finite()))
                    .unwrap_or(false);
                !ok
            })
            .unwrap_or(0);
        return Err(Error::NonFiniteResidual {
            index,
            t: batch.times[index],
        });
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disease_free_equilibrium() {
        assert_eq!(sir_rhs([1.0, 0.0, 0.0], ParamVec::new(0.6, 0.4)), [-0.0, 0.0, 0.0]);
    }

    #[test]
    fn hand_evaluated_sir() {
        let v = sir_rhs([0.5, 0.3, 0.2], ParamVec::new(0.6, 0.4));
        let expected = [-0.09, -0.03, 0.12];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn sirp_with_empty_passive_matches_sir() {
        let theta = ParamVec::new(0.6, 0.4);
        let p = sirp_rhs([0.5, 0.3, 0.2, 0.0], theta);
        let s = sir_rhs([0.5, 0.3, 0.2], theta);
        assert_eq!(&p[..3], &s[..]);
        assert_eq!(p[3], 0.0);
        let q = sirp_rhs([0.02, 0.01, 0.01, 0.96], theta);
        assert_eq!(q[3], 0.0);
    }

    #[test]
    fn reproduction_number() {
        assert_eq!(basic_reproduction_number(ParamVec::new(0.5, 0.5)).unwrap(), 1.0);
        assert!((basic_reproduction_number(ParamVec::new(0.6, 0.4)).unwrap() - 1.5).abs() < 1e-15);
        assert!(basic_reproduction_number(ParamVec::new(0.6, 0.0)).is_err());
        assert!(basic_reproduction_number(ParamVec::new(0.6, -1.0)).is_err());
    }

    #[test]
    fn derived_susceptible() {
        let z = ModelDef::SIRP.full_state(&[0.01, 0.02, 0.9]);
        assert!((z[0] - 0.07).abs() < 1e-15);
        assert_eq!(ModelDef::SIR.quantities(), ["I0", "R0", "beta", "gamma"]);
        assert_eq!(ModelDef::SIRP.input_dim(), 6);
    }
}
