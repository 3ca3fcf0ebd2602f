//! Supervised stage: gradient descent on `(free z0, theta)` through a frozen
//! surrogate to match observations.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::BundleSpec;
use crate::diff::{DualVar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{basic_reproduction_number, ModelDef, ModelId, ParamVec};
use crate::net::{constraint, SurrogateNet};
use crate::obs::{ObservationSeries, Split};
use crate::optim::Adam;
use crate::oracle::{integrate, linspace, Trajectory, DEFAULT_STEP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum InitStrategy {
    BundleCenter,
    RandomInBundle,
    /// One value per fittable quantity, in model order.
    UserSupplied(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init: InitStrategy,
    /// Quantities held at their initial value (e.g. `I0`, `R0` taken from data).
    #[serde(default)]
    pub pinned: Vec<String>,
    /// Values applied on top of the init strategy.
    #[serde(default)]
    pub overrides: Vec<(String, f64)>,
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            learning_rate: 1e-2,
            seed: 0,
            init: InitStrategy::BundleCenter,
            pinned: Vec::new(),
            overrides: Vec::new(),
            early_stop_window: 200,
            early_stop_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: ModelId,
    /// Fittable quantity names, aligned with `fitted` and `initial`.
    pub quantities: Vec<String>,
    pub fitted: Vec<f64>,
    pub initial: Vec<f64>,
    /// Full initial state including the derived `S0`.
    pub z0: Vec<f64>,
    pub theta: ParamVec,
    pub r0: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub loss_trace: Vec<f64>,
    pub iterations_run: usize,
    pub init: InitStrategy,
    pub pinned: Vec<String>,
    pub seed: u64,
    /// Last train time; forecasts must extend past it.
    pub data_end: f64,
    /// Surrogate trajectory over the trained time range.
    pub trajectory: Trajectory,
}

impl FitResult {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.quantities
            .iter()
            .position(|q| q.eq_ignore_ascii_case(name))
            .map(|i| self.fitted[i])
    }

    pub fn free_init(&self) -> &[f64] {
        &self.z0[1..]
    }
}

fn split_values(values: &[f64], model: &ModelDef) -> (Vec<f64>, ParamVec) {
    let nf = model.n_free();
    (values[..nf].to_vec(), ParamVec::new(values[nf], values[nf + 1]))
}

fn t_range(net: &SurrogateNet) -> (f64, f64) {
    (net.scaling.lo[0], net.scaling.hi[0])
}

fn check_times(net: &SurrogateNet, obs: &ObservationSeries, points: &[usize]) -> Result<()> {
    let (lo, hi) = t_range(net);
    let bad: Vec<(usize, f64)> = points
        .iter()
        .filter(|&&i| !(obs.times[i] >= lo && obs.times[i] <= hi))
        .map(|&i| (i, obs.times[i]))
        .collect();
    if !bad.is_empty() {
        return Err(Error::OutOfRange { range: (lo, hi), points: bad });
    }
    Ok(())
}

fn observed_columns(model: &ModelDef, obs: &ObservationSeries) -> Result<Vec<usize>> {
    obs.series
        .iter()
        .map(|s| {
            model
                .compartment_index(&s.name)
                .ok_or_else(|| Error::Config(format!("{} has no compartment `{}`", model.id, s.name)))
        })
        .collect()
}

/// Mean over `split` points and observed compartments of `(z_hat - z_obs)^2`.
/// Compartments absent from `obs` do not contribute.
pub fn inverse_loss(
    net: &SurrogateNet,
    model: &ModelDef,
    z0_free: &[f64],
    theta: ParamVec,
    obs: &ObservationSeries,
    split: Split,
) -> Result<f64> {
    net.check_model(model)?;
    let points = obs.indices(split);
    if points.is_empty() {
        return Err(Error::Config(format!("no {} observations", split.name())));
    }
    check_times(net, obs, &points)?;
    let cols = observed_columns(model, obs)?;
    let z0 = model.full_state(z0_free);
    let mut total = 0.0;
    for &i in &points {
        let z = net.constrained_forward(obs.times[i], &z0, theta)?;
        for (s, &k) in obs.series.iter().zip(&cols) {
            let r = z[k] - s.values[i];
            total += r * r;
        }
    }
    Ok(total / (points.len() * cols.len()) as f64)
}

/// Records the constrained state only (no time derivative) for a batch of
/// times sharing one `(z0, theta)`.
fn record_state(tape: &mut Tape, net: &SurrogateNet, weights: &[(Var, Var)], times: &[f64], quantities: &[Var], model: &ModelDef) -> Var {
    let n = times.len();
    let nf = model.n_free();
    let scaling = net.scaling();

    let scaled: Vec<Var> = quantities
        .iter()
        .enumerate()
        .map(|(q, &v)| tape.affine(v, scaling.factor(q + 1), scaling.offset(q + 1)))
        .collect();
    let row = tape.concat_cols(&scaled);
    let rows = tape.broadcast_rows(row, n);
    let t_col = tape.constant(Tensor::column(times.iter().map(|&t| t * scaling.factor(0) + scaling.offset(0)).collect()));
    let x = tape.concat_cols(&[t_col, rows]);

    let mut free_sum = quantities[0];
    for &q in &quantities[1..nf] {
        free_sum = tape.add(free_sum, q);
    }
    let s0 = tape.affine(free_sum, -1.0, 1.0);
    let mut z0_parts = Vec::with_capacity(nf + 1);
    z0_parts.push(s0);
    z0_parts.extend_from_slice(&quantities[..nf]);
    let z0_row = tape.concat_cols(&z0_parts);
    let z0 = tape.broadcast_rows(z0_row, n);

    let z_nn = net.record_raw(tape, weights, DualVar::constant(x)).value;
    let d = model.n_compartments();
    let f = tape.constant(Tensor::from_fn(n, d, |i, _| constraint(times[i])));
    let diff = tape.sub(z_nn, z0);
    let scaled_diff = tape.mul(f, diff);
    tape.add(z0, scaled_diff)
}

/// Loss value and gradient with respect to the unpinned quantities.
pub fn inverse_loss_and_grad(
    net: &SurrogateNet,
    model: &ModelDef,
    values: &[f64],
    free: &[bool],
    obs: &ObservationSeries,
    split: Split,
) -> Result<(f64, Vec<f64>)> {
    net.check_model(model)?;
    let points = obs.indices(split);
    if points.is_empty() {
        return Err(Error::Config(format!("no {} observations", split.name())));
    }
    check_times(net, obs, &points)?;
    let cols = observed_columns(model, obs)?;
    let times: Vec<f64> = points.iter().map(|&i| obs.times[i]).collect();

    let mut tape = Tape::new();
    let weights = net.register(&mut tape, false);
    let quantities: Vec<Var> = values
        .iter()
        .zip(free)
        .map(|(&v, &is_free)| {
            if is_free {
                tape.param(Tensor::scalar(v))
            } else {
                tape.constant(Tensor::scalar(v))
            }
        })
        .collect();
    let zhat = record_state(&mut tape, net, &weights, &times, &quantities, model);
    let mut total: Option<Var> = None;
    for (s, &k) in obs.series.iter().zip(&cols) {
        let col = tape.column(zhat, k);
        let target = tape.constant(Tensor::column(points.iter().map(|&i| s.values[i]).collect()));
        let r = tape.sub(col, target);
        let r2 = tape.square(r);
        let sum = tape.sum_all(r2);
        total = Some(match total {
            Some(t) => tape.add(t, sum),
            None => sum,
        });
    }
    let loss = tape.scale(total.expect("observed compartments"), 1.0 / (points.len() * cols.len()) as f64);
    let value = tape.value(loss).item();
    let grad = tape.backward(loss)?;
    Ok((value, grad.into_vec()))
}

/// Surrogate trajectory at `times` for fixed inputs.
pub fn surrogate_trajectory(net: &SurrogateNet, model: &ModelDef, z0: &[f64], theta: ParamVec, times: &[f64]) -> Result<Trajectory> {
    let states = times
        .iter()
        .map(|&t| net.constrained_forward(t, z0, theta))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        compartments: model.compartments().iter().map(|c| c.to_string()).collect(),
        times: times.to_vec(),
        states,
        slopes: Vec::new(),
    })
}

fn resolve_index(model: &ModelDef, name: &str) -> Result<usize> {
    model
        .quantities()
        .iter()
        .position(|q| q.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::Config(format!("{} has no fittable quantity `{name}`", model.id)))
}

/// Starting point from the init strategy and overrides.
pub fn initial_values(model: &ModelDef, bundle: &BundleSpec, config: &FitConfig) -> Result<Vec<f64>> {
    let intervals = bundle.intervals();
    let mut values = match &config.init {
        InitStrategy::BundleCenter => bundle.center(),
        InitStrategy::RandomInBundle => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            // Redraw until the derived susceptible fraction is non-negative.
            loop {
                let v: Vec<f64> = intervals.iter().map(|i| i.sample(&mut rng)).collect();
                if v[..model.n_free()].iter().sum::<f64>() <= 1.0 {
                    break v;
                }
            }
        }
        InitStrategy::UserSupplied(v) => {
            if v.len() != intervals.len() {
                return Err(Error::Config(format!(
                    "user-supplied init has {} values, {} needs {}",
                    v.len(),
                    model.id,
                    intervals.len()
                )));
            }
            v.clone()
        }
    };
    for (name, v) in &config.overrides {
        values[resolve_index(model, name)?] = *v;
    }
    for ((name, v), i) in model.quantities().iter().zip(&values).zip(&intervals) {
        if !i.contains(*v) {
            return Err(Error::Config(format!(
                "initial {name} = {v} lies outside the trained bundle [{}, {}]",
                i.lo, i.hi
            )));
        }
    }
    Ok(values)
}

/// Gradient descent (Adam) on the unpinned quantities, clamped to the
/// bundle after every step.
pub fn fit(
    net: &SurrogateNet,
    model: &ModelDef,
    bundle: &BundleSpec,
    obs: &ObservationSeries,
    config: &FitConfig,
) -> Result<FitResult> {
    net.check_model(model)?;
    bundle.validate(model)?;
    obs.validate(model)?;
    let train_points = obs.indices(Split::Train);
    if train_points.is_empty() {
        return Err(Error::Config("no training observations".into()));
    }
    let mut check: Vec<usize> = train_points.clone();
    check.extend(obs.indices(Split::Validation));
    check_times(net, obs, &check)?;

    let names = model.quantities();
    let mut free = alloc::vec![true; names.len()];
    for p in &config.pinned {
        free[resolve_index(model, p)?] = false;
    }
    if !free.iter().any(|&f| f) {
        return Err(Error::AllPinned);
    }
    let intervals = bundle.intervals();
    let initial = initial_values(model, bundle, config)?;
    let mut values = initial.clone();
    let free_idx: Vec<usize> = (0..names.len()).filter(|&i| free[i]).collect();
    let mut adam = Adam::new(free_idx.len(), config.learning_rate);
    let mut trace = Vec::with_capacity(config.iterations);
    let mut steps = 0;

    for it in 0..config.iterations {
        let (loss, grad) = inverse_loss_and_grad(net, model, &values, &free, obs, Split::Train).map_err(|e| match e {
            Error::Diff(_) => Error::NanLoss { iteration: it },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::NanLoss { iteration: it });
        }
        trace.push(loss);
        if loss == 0.0 {
            break;
        }
        let w = config.early_stop_window;
        if w > 0 && it >= w {
            let before = trace[it - w];
            if (before - loss) / before.abs() < config.early_stop_tol {
                break;
            }
        }
        let mut sub: Vec<f64> = free_idx.iter().map(|&i| values[i]).collect();
        adam.step(&mut sub, &grad);
        for (k, &i) in free_idx.iter().enumerate() {
            values[i] = intervals[i].clamp(sub[k]);
        }
        // Keep S0 >= 0 by trimming the last free initial condition if needed.
        let nf = model.n_free();
        let excess = values[..nf].iter().sum::<f64>() - 1.0;
        if excess > 0.0 {
            if let Some(&j) = free_idx.iter().rfind(|&&i| i < nf) {
                values[j] = intervals[j].clamp(values[j] - excess);
            }
        }
        steps += 1;
    }

    let (z0_free, theta) = split_values(&values, model);
    let train_loss = inverse_loss(net, model, &z0_free, theta, obs, Split::Train)?;
    let val_loss = if obs.indices(Split::Validation).is_empty() {
        None
    } else {
        Some(inverse_loss(net, model, &z0_free, theta, obs, Split::Validation)?)
    };
    let z0 = model.full_state(&z0_free);
    let (_, t_max) = t_range(net);
    let trajectory = surrogate_trajectory(net, model, &z0, theta, &linspace(0.0, t_max, 201))?;
    let data_end = train_points.iter().map(|&i| obs.times[i]).fold(f64::NEG_INFINITY, f64::max);
    Ok(FitResult {
        model: model.id,
        quantities: names.iter().map(|s| s.to_string()).collect(),
        fitted: values,
        initial,
        r0: basic_reproduction_number(theta)?,
        z0,
        theta,
        train_loss,
        val_loss,
        loss_trace: trace,
        iterations_run: steps,
        init: config.init.clone(),
        pinned: config.pinned.clone(),
        seed: config.seed,
        data_end,
        trajectory,
    })
}

/// Fitted trajectory out to `horizon`: the surrogate inside its trained
/// range, then the RK4 oracle started from the surrogate's end state.
pub fn forecast(fit: &FitResult, net: &SurrogateNet, horizon: f64, step: f64) -> Result<Trajectory> {
    if !(horizon > fit.data_end) {
        return Err(Error::Config(format!(
            "forecast horizon {horizon} must extend past the last training time {}",
            fit.data_end
        )));
    }
    if !(step > 0.0) {
        return Err(Error::Config(format!("output step must be positive, got {step}")));
    }
    let model = ModelDef::new(fit.model);
    let (_, t_max) = t_range(net);
    let inside_end = horizon.min(t_max);
    let n_inside = libm::ceil(inside_end / step - 1e-9).max(1.0) as usize + 1;
    let mut traj = surrogate_trajectory(net, &model, &fit.z0, fit.theta, &linspace(0.0, inside_end, n_inside))?;
    if horizon > t_max {
        let start = traj.states.last().expect("non-empty").clone();
        let n_out = libm::ceil((horizon - t_max) / step - 1e-9).max(1.0) as usize + 1;
        let grid = linspace(t_max, horizon, n_out);
        let tail = integrate(&model, &start, fit.theta, &grid).or_else(|_| {
            // The surrogate end state can sit a hair outside [0, 1]; project it.
            let mut z: Vec<f64> = start.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            let s: f64 = z.iter().sum();
            z.iter_mut().for_each(|v| *v /= s);
            integrate(&model, &z, fit.theta, &grid)
        })?;
        traj.times.extend_from_slice(&tail.times[1..]);
        traj.states.extend(tail.states.into_iter().skip(1));
    }
    Ok(traj)
}

/// Default output step for dense fitted curves.
pub const FORECAST_STEP: f64 = 10.0 * DEFAULT_STEP;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::obs::ObservedSeries;
    use alloc::vec;

    fn net() -> (SurrogateNet, BundleSpec) {
        let bundle = BundleSpec::standard_sir();
        let cfg = NetConfig::for_model(&ModelDef::SIR).with_hidden(2, 8);
        (SurrogateNet::new(ModelId::Sir, cfg, bundle.scaling(), 21).unwrap(), bundle)
    }

    fn self_obs(net: &SurrogateNet, values: &[f64]) -> ObservationSeries {
        let model = ModelDef::SIR;
        let (free, theta) = split_values(values, &model);
        let z0 = model.full_state(&free);
        let times = linspace(0.0, 20.0, 20);
        let traj = surrogate_trajectory(net, &model, &z0, theta, &times).unwrap();
        ObservationSeries {
            times,
            series: (0..3)
                .map(|k| ObservedSeries {
                    name: model.compartments()[k].into(),
                    values: traj.compartment(k),
                })
                .collect(),
            split: vec![Split::Train; 20],
        }
        .with_chronological_split(0.8)
    }

    #[test]
    fn self_consistent_data_has_zero_loss() {
        let (net, bundle) = net();
        let c = bundle.center();
        let obs = self_obs(&net, &c);
        let l = inverse_loss(&net, &ModelDef::SIR, &c[..2], ParamVec::new(c[2], c[3]), &obs, Split::Train).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn single_point_squared_error() {
        let (net, bundle) = net();
        let c = bundle.center();
        let z0 = ModelDef::SIR.full_state(&c[..2]);
        let theta = ParamVec::new(c[2], c[3]);
        let z = net.constrained_forward(5.0, &z0, theta).unwrap();
        let obs = ObservationSeries {
            times: vec![5.0],
            series: vec![ObservedSeries {
                name: "I".into(),
                values: vec![z[1] - 0.3],
            }],
            split: vec![Split::Train],
        };
        let l = inverse_loss(&net, &ModelDef::SIR, &c[..2], theta, &obs, Split::Train).unwrap();
        assert!((l - 0.09).abs() < 1e-15);
    }

    #[test]
    fn full_mask_is_mean_of_single_masks() {
        let (net, bundle) = net();
        let mut v = bundle.center();
        let obs = self_obs(&net, &v);
        v[2] = 0.7;
        let theta = ParamVec::new(v[2], v[3]);
        let full = inverse_loss(&net, &ModelDef::SIR, &v[..2], theta, &obs, Split::Train).unwrap();
        let parts: f64 = ["S", "I", "R"]
            .iter()
            .map(|c| inverse_loss(&net, &ModelDef::SIR, &v[..2], theta, &obs.restrict(&[c]).unwrap(), Split::Train).unwrap())
            .sum();
        assert!((full - parts / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tape_and_scalar_losses_agree() {
        let (net, bundle) = net();
        let obs = self_obs(&net, &bundle.center());
        let v = [0.25, 0.15, 0.5, 0.6];
        let (l, g) = inverse_loss_and_grad(&net, &ModelDef::SIR, &v, &[true; 4], &obs, Split::Train).unwrap();
        let s = inverse_loss(&net, &ModelDef::SIR, &v[..2], ParamVec::new(v[2], v[3]), &obs, Split::Train).unwrap();
        assert!((l - s).abs() <= 1e-15 * s.max(1e-300) + 1e-18);
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn out_of_range_times_are_listed() {
        let (net, bundle) = net();
        let c = bundle.center();
        let mut obs = self_obs(&net, &c);
        obs.times[3] = 25.0;
        let err = inverse_loss(&net, &ModelDef::SIR, &c[..2], ParamVec::new(c[2], c[3]), &obs, Split::Train).unwrap_err();
        assert_eq!(err, Error::OutOfRange { range: (0.0, 20.0), points: vec![(3, 25.0)] });
    }

    #[test]
    fn fixed_point_needs_no_iterations() {
        let (net, bundle) = net();
        let obs = self_obs(&net, &bundle.center());
        let r = fit(&net, &ModelDef::SIR, &bundle, &obs, &FitConfig::default()).unwrap();
        assert_eq!(r.iterations_run, 0);
        assert!(r.train_loss < 1e-30);
        assert_eq!(r.fitted, bundle.center());
    }

    #[test]
    fn all_pinned_is_an_error() {
        let (net, bundle) = net();
        let obs = self_obs(&net, &bundle.center());
        let cfg = FitConfig {
            pinned: vec!["I0".into(), "R0".into(), "beta".into(), "gamma".into()],
            ..FitConfig::default()
        };
        assert_eq!(fit(&net, &ModelDef::SIR, &bundle, &obs, &cfg).unwrap_err(), Error::AllPinned);
    }

    #[test]
    fn iterates_stay_in_bundle_and_pins_hold() {
        let (net, bundle) = net();
        let obs = self_obs(&net, &[0.39, 0.11, 0.79, 0.31]);
        let cfg = FitConfig {
            iterations: 300,
            learning_rate: 0.05,
            pinned: vec!["R0".into()],
            ..FitConfig::default()
        };
        let r = fit(&net, &ModelDef::SIR, &bundle, &obs, &cfg).unwrap();
        assert!(bundle.contains(&r.fitted));
        assert_eq!(r.fitted[1], bundle.center()[1]);
        let recomputed = inverse_loss(&net, &ModelDef::SIR, r.free_init(), r.theta, &obs, Split::Validation).unwrap();
        assert_eq!(Some(recomputed), r.val_loss);
    }

    #[test]
    fn forecast_requires_future_horizon() {
        let (net, bundle) = net();
        let obs = self_obs(&net, &bundle.center());
        let r = fit(&net, &ModelDef::SIR, &bundle, &obs, &FitConfig::default()).unwrap();
        assert!(forecast(&r, &net, 5.0, 0.1).is_err());
        let inside = forecast(&r, &net, 19.9, 0.1).unwrap();
        assert!(inside.t_end() <= 20.0);
    }
}
