//! Unsupervised bundle training on the ODE residual.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{sample_batch, BundleSpec};
use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::models::{record_residual_loss, residual_loss, ModelDef, ParamVec};
use crate::net::{NetConfig, OutputMode, SurrogateNet};
use crate::optim::{Optimizer, OptimizerKind};
use crate::oracle::{integrate, linspace};

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_collocation: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Jitter half-width; `None` means half the grid spacing.
    pub perturbation_scale: Option<f64>,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Learning rate multiplies by `lr_decay` every `lr_decay_every` iterations.
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub lr_decay_every: usize,
    pub validation_draws: usize,
}

fn default_decay() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_collocation: 2000,
            iterations: 30_000,
            learning_rate: 1e-3,
            perturbation_scale: None,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            lr_decay: 1.0,
            lr_decay_every: 0,
            validation_draws: 10,
        }
    }
}

impl TrainConfig {
    pub fn grid_spacing(&self, bundle: &BundleSpec) -> f64 {
        bundle.t_max() / (self.n_collocation.max(2) - 1) as f64
    }

    pub fn perturbation(&self, bundle: &BundleSpec) -> f64 {
        self.perturbation_scale
            .unwrap_or_else(|| 0.5 * self.grid_spacing(bundle))
    }

    pub fn validate(&self, bundle: &BundleSpec) -> Result<()> {
        if self.n_collocation < 2 {
            return Err(Error::Config("need at least 2 collocation points".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        let p = self.perturbation(bundle);
        if !(p >= 0.0) || p >= self.grid_spacing(bundle) {
            return Err(Error::Config(format!(
                "perturbation {p} must be non-negative and below the grid spacing {}",
                self.grid_spacing(bundle)
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
    /// Residual loss on a fixed, unperturbed evaluation batch after training.
    pub final_loss: f64,
    /// Max absolute compartment error against the RK4 oracle over random
    /// in-bundle draws.
    pub validation_max_abs_error: f64,
    pub validation_draws: usize,
    pub batching: String,
    /// Filled in by callers that own a clock.
    pub wall_time_secs: Option<f64>,
}

/// Fixed evaluation batch used for end-of-training losses.
fn evaluation_batch(bundle: &BundleSpec, model: &ModelDef, n: usize) -> crate::models::CollocationBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_e7a1);
    sample_batch(bundle, model, n, 0.0, &mut rng)
}

/// Max absolute compartment error of `net` against the RK4 oracle over
/// `draws` random in-bundle `(z0, theta)`, each compared on 101 times.
pub fn validate_against_oracle(net: &SurrogateNet, model: &ModelDef, bundle: &BundleSpec, draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = linspace(0.0, bundle.t_max(), 101);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let batch = sample_batch(bundle, model, 1, 0.0, &mut rng);
        let z0 = model.full_state(batch.init.row_slice(0));
        let theta = ParamVec::new(batch.params.get(0, 0), batch.params.get(0, 1));
        let truth = integrate(model, &z0, theta, &grid)?;
        for (t, state) in grid.iter().zip(&truth.states) {
            let pred = net.constrained_forward(*t, &z0, theta)?;
            for (a, b) in pred.iter().zip(state) {
                worst = worst.max(libm::fabs(a - b));
            }
        }
    }
    Ok(worst)
}

/// Number of `(t, k)` points where a surrogate trajectory leaves `[0, 1]`
/// over `draws` random in-bundle inputs.
pub fn count_range_violations(net: &SurrogateNet, model: &ModelDef, bundle: &BundleSpec, draws: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = linspace(0.0, bundle.t_max(), 201);
    let mut count = 0;
    for _ in 0..draws {
        let batch = sample_batch(bundle, model, 1, 0.0, &mut rng);
        let z0 = model.full_state(batch.init.row_slice(0));
        let theta = ParamVec::new(batch.params.get(0, 0), batch.params.get(0, 1));
        for &t in &grid {
            let z = net.constrained_forward(t, &z0, theta)?;
            count += z.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        }
    }
    Ok(count)
}

/// Trains a fresh network. `observe` sees `(iteration, loss)` after each step.
pub fn train(
    model: &ModelDef,
    bundle: &BundleSpec,
    net_config: &NetConfig,
    config: &TrainConfig,
    observe: &mut dyn FnMut(usize, f64),
) -> Result<(SurrogateNet, TrainReport)> {
    bundle.validate(model)?;
    config.validate(bundle)?;
    let net = SurrogateNet::new(model.id, net_config.clone(), bundle.scaling(), config.seed)?;
    train_from(net, model, bundle, config, observe)
}

/// Continues training an existing network.
pub fn train_from(
    mut net: SurrogateNet,
    model: &ModelDef,
    bundle: &BundleSpec,
    config: &TrainConfig,
    observe: &mut dyn FnMut(usize, f64),
) -> Result<(SurrogateNet, TrainReport)> {
    net.check_model(model)?;
    bundle.validate(model)?;
    config.validate(bundle)?;
    // Sampling stream, distinct from the weight-init stream.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let perturbation = config.perturbation(bundle);
    let mut params = net.flat_params();
    let mut opt = Optimizer::new(config.optimizer, params.len(), config.learning_rate);
    let mut lr = config.learning_rate;
    let mut trace = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        if config.lr_decay_every > 0 && it > 0 && it % config.lr_decay_every == 0 {
            lr *= config.lr_decay;
            opt.set_lr(lr);
        }
        let batch = sample_batch(bundle, model, config.n_collocation, perturbation, &mut rng);
        let mut tape = Tape::new();
        let weights = net.register(&mut tape, true);
        let loss = record_residual_loss(&mut tape, model, &net, &weights, &batch);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NanLoss { iteration: it });
        }
        if value > DIVERGENCE_LOSS {
            return Err(Error::Diverged { iteration: it, loss: value });
        }
        let grad = tape.backward(loss).map_err(|_| Error::NanLoss { iteration: it })?;
        opt.step(&mut params, grad.as_slice());
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NanLoss { iteration: it });
        }
        net.set_flat_params(&params);
        trace.push(value);
        observe(it, value);
    }

    let eval = evaluation_batch(bundle, model, config.n_collocation.min(1000));
    let final_loss = residual_loss(model, &net, &eval)?;
    let validation_max_abs_error = validate_against_oracle(&net, model, bundle, config.validation_draws, config.seed ^ 0xa11d)?;
    Ok((
        net,
        TrainReport {
            loss_trace: trace,
            final_loss,
            validation_max_abs_error,
            validation_draws: config.validation_draws,
            batching: "one independent (z0, theta) draw per collocation point, fresh every iteration".into(),
            wall_time_secs: None,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub output_mode: OutputMode,
    pub report: TrainReport,
    pub range_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub softmax: AblationRun,
    pub identity: AblationRun,
}

impl Ablation {
    pub fn softmax_lower(&self) -> bool {
        self.softmax.report.final_loss < self.identity.report.final_loss
    }
}

/// Trains the same configuration with softmax and identity outputs.
pub fn ablate_output_mode(
    model: &ModelDef,
    bundle: &BundleSpec,
    net_config: &NetConfig,
    config: &TrainConfig,
) -> Result<Ablation> {
    let run = |mode: OutputMode| -> Result<AblationRun> {
        let cfg = net_config.clone().with_output_mode(mode);
        let (net, report) = train(model, bundle, &cfg, config, &mut |_, _| {})?;
        let range_violations = count_range_violations(&net, model, bundle, config.validation_draws.max(10), config.seed ^ 0x0bad)?;
        Ok(AblationRun {
            output_mode: mode,
            report,
            range_violations,
        })
    };
    Ok(Ablation {
        softmax: run(OutputMode::Softmax)?,
        identity: run(OutputMode::Identity)?,
    })
}
