//! Finite-difference checks of the analytic derivatives.
//!
//! Errors are normwise: `max_i |analytic_i - fd_i| / max(max_i |fd_i|, FLOOR)`.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{sample_batch, BundleSpec};
use crate::diff::{DualVar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::fit::{inverse_loss, inverse_loss_and_grad};
use crate::models::{record_residual_loss, residual_loss, ModelDef, ModelId, ParamVec};
use crate::net::{NetConfig, OutputMode, SurrogateNet};
use crate::obs::{ObservationSeries, ObservedSeries, Split};
use crate::oracle::linspace;

/// Denominator floor for normwise relative errors.
pub const FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Net outputs: time tangent (forward mode) and weight gradient (reverse mode).
    Net,
    /// Residual loss with respect to the weights.
    Loss,
    /// Inverse loss with respect to the fittable quantities.
    Inverse,
}

impl Scope {
    pub fn parse(s: &str) -> Option<Scope> {
        match s {
            "net" => Some(Scope::Net),
            "loss" => Some(Scope::Loss),
            "inverse" => Some(Scope::Inverse),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scope::Net => "net",
            Scope::Loss => "loss",
            Scope::Inverse => "inverse",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Net => 1e-5,
            Scope::Loss | Scope::Inverse => 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub scope: Scope,
    pub configs: usize,
    pub seed: u64,
    pub max_rel_error: f64,
    /// Configuration index that produced `max_rel_error`.
    pub worst_config: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Normwise relative error between two gradient vectors.
pub fn rel_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(FLOOR, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &[f64], i: usize, h: f64) -> Result<f64> {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    Ok((f(&xp)? - f(&xm)?) / (2.0 * h))
}

/// A small random network with random shape and output mode.
pub fn random_net(rng: &mut ChaCha8Rng, model: &ModelDef, bundle: &BundleSpec) -> Result<SurrogateNet> {
    let layers = rng.random_range(1..=3);
    let width = rng.random_range(2..=12);
    let mode = if rng.random_bool(0.75) { OutputMode::Softmax } else { OutputMode::Identity };
    let cfg = NetConfig::for_model(model).with_hidden(layers, width).with_output_mode(mode);
    SurrogateNet::new(model.id, cfg, bundle.scaling(), rng.random())
}

fn random_point(rng: &mut ChaCha8Rng, bundle: &BundleSpec, model: &ModelDef) -> (f64, Vec<f64>, ParamVec) {
    let batch = sample_batch(bundle, model, 1, 0.0, rng);
    let t = rng.random_range(0.0..=bundle.t_max());
    (t, model.full_state(batch.init.row_slice(0)), ParamVec::new(batch.params.get(0, 0), batch.params.get(0, 1)))
}

/// Runs `configs` random checks of `scope`. With `corrupt`, the analytic
/// gradient is deliberately perturbed, so the check must fail.
pub fn run(scope: Scope, configs: usize, seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    if configs == 0 {
        return Err(Error::Config("gradcheck needs at least one configuration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0_f64, 0usize);
    for c in 0..configs {
        let model = if rng.random_bool(0.5) { ModelDef::SIR } else { ModelDef::SIRP };
        let bundle = default_bundle(model.id);
        let net = random_net(&mut rng, &model, &bundle)?;
        let (mut analytic, fd) = match scope {
            Scope::Net => check_net(&mut rng, &net, &model, &bundle)?,
            Scope::Loss => check_loss(&mut rng, &net, &model, &bundle)?,
            Scope::Inverse => check_inverse(&mut rng, &net, &model, &bundle)?,
        };
        if corrupt {
            let k = rng.random_range(0..analytic.len());
            analytic[k] += 1e-2 * (1.0 + analytic[k].abs());
        }
        let e = rel_error(&analytic, &fd);
        if !(e <= worst.0) {
            worst = (e, c);
        }
    }
    let tolerance = scope.tolerance();
    Ok(GradCheckReport {
        scope,
        configs,
        seed,
        max_rel_error: worst.0,
        worst_config: worst.1,
        tolerance,
        passed: worst.0 < tolerance,
    })
}

/// Bundle used for random gradcheck points.
pub fn default_bundle(model: ModelId) -> BundleSpec {
    let mut b = BundleSpec::standard_sir();
    if model == ModelId::Sirp {
        b.init = alloc::vec![b.init[0], b.init[1], crate::bundle::Interval::new(0.1, 0.3)];
    }
    b
}

/// Sampled parameter coordinates for weight checks.
const WEIGHT_SAMPLES: usize = 24;

fn sample_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    if n <= WEIGHT_SAMPLES {
        return (0..n).collect();
    }
    (0..WEIGHT_SAMPLES).map(|_| rng.random_range(0..n)).collect()
}

fn check_net(rng: &mut ChaCha8Rng, net: &SurrogateNet, model: &ModelDef, bundle: &BundleSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let (t, z0, theta) = random_point(rng, bundle, model);
    let mut analytic = Vec::new();
    let mut fd = Vec::new();

    // Forward mode: d z_hat / dt.
    let (_, dz) = net.constrained_with_derivative(t, &z0, theta)?;
    let h = 1e-5;
    let zp = net.constrained_forward(t + h, &z0, theta)?;
    let zm = net.constrained_forward(t - h, &z0, theta)?;
    for k in 0..dz.len() {
        analytic.push(dz[k]);
        fd.push((zp[k] - zm[k]) / (2.0 * h));
    }

    // Reverse mode: gradient of c . z_hat with respect to the weights.
    let c: Vec<f64> = (0..model.n_compartments()).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut tape = Tape::new();
    let weights = net.register(&mut tape, true);
    let raw = net.raw_input(t, &z0, theta)?;
    let x = Tensor::row(net.scaling().apply(&raw));
    let x = tape.constant(x);
    let z0v = tape.constant(Tensor::row(z0.clone()));
    let (zhat, _) = net.record_constrained(&mut tape, &weights, &[t], DualVar::constant(z0v), DualVar::constant(x));
    let cv = tape.constant(Tensor::row(c.clone()));
    let prod = tape.mul(zhat, cv);
    let out = tape.sum_all(prod);
    let grad = tape.backward(out)?.into_vec();

    let params = net.flat_params();
    let mut probe = net.clone();
    let mut f = |p: &[f64]| -> Result<f64> {
        probe.set_flat_params(p);
        let z = probe.constrained_forward(t, &z0, theta)?;
        Ok(z.iter().zip(&c).map(|(a, b)| a * b).sum())
    };
    let mut wa = Vec::new();
    let mut wf = Vec::new();
    for i in sample_coords(rng, params.len()) {
        wa.push(grad[i]);
        wf.push(central_difference(&mut f, &params, i, 1e-6)?);
    }
    // Weight block is judged on its own scale.
    let e_t = rel_error(&analytic, &fd);
    let e_w = rel_error(&wa, &wf);
    Ok(if e_w > e_t { (wa, wf) } else { (analytic, fd) })
}

fn check_loss(rng: &mut ChaCha8Rng, net: &SurrogateNet, model: &ModelDef, bundle: &BundleSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rng.random_range(4..=16);
    let batch = sample_batch(bundle, model, n, 0.5 * bundle.t_max() / (n - 1) as f64, rng);
    let mut tape = Tape::new();
    let weights = net.register(&mut tape, true);
    let loss = record_residual_loss(&mut tape, model, net, &weights, &batch);
    let grad = tape.backward(loss)?.into_vec();
    let params = net.flat_params();
    let mut probe = net.clone();
    let mut f = |p: &[f64]| -> Result<f64> {
        probe.set_flat_params(p);
        residual_loss(model, &probe, &batch)
    };
    let mut a = Vec::new();
    let mut d = Vec::new();
    for i in sample_coords(rng, params.len()) {
        a.push(grad[i]);
        d.push(central_difference(&mut f, &params, i, 1e-6)?);
    }
    Ok((a, d))
}

fn check_inverse(rng: &mut ChaCha8Rng, net: &SurrogateNet, model: &ModelDef, bundle: &BundleSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rng.random_range(3..=20);
    let times = linspace(0.0, bundle.t_max(), n);
    let mut series = Vec::new();
    for c in model.compartments() {
        if series.is_empty() || rng.random_bool(0.7) {
            series.push(ObservedSeries {
                name: (*c).into(),
                values: (0..n).map(|_| rng.random_range(0.0..=1.0)).collect(),
            });
        }
    }
    let obs = ObservationSeries {
        times,
        series,
        split: alloc::vec![Split::Train; n],
    };
    let (_, z0, theta) = random_point(rng, bundle, model);
    let mut values: Vec<f64> = z0[1..].to_vec();
    values.extend(theta.as_array());
    let free = alloc::vec![true; values.len()];
    let (_, grad) = inverse_loss_and_grad(net, model, &values, &free, &obs, Split::Train)?;
    let nf = model.n_free();
    let mut f = |v: &[f64]| inverse_loss(net, model, &v[..nf], ParamVec::new(v[nf], v[nf + 1]), &obs, Split::Train);
    let fd = (0..values.len())
        .map(|i| central_difference(&mut f, &values, i, 1e-6))
        .collect::<Result<Vec<_>>>()?;
    if grad.len() != fd.len() {
        return Err(Error::Shape(format!("gradient has {} entries, expected {}", grad.len(), fd.len())));
    }
    Ok((grad, fd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_is_normwise() {
        assert_eq!(rel_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((rel_error(&[2.1, 0.0], &[2.0, 0.0]) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn corruption_is_detected() {
        for scope in [Scope::Net, Scope::Loss, Scope::Inverse] {
            assert!(!run(scope, 3, 7, true).unwrap().passed, "{scope:?}");
        }
    }
}
