//! The surrogate network and its hard-constraint wrapper.
//!
//! The raw network maps `(t, free z0, theta)` to a candidate state `z_nn`.
//! The constrained output is `z0 + f(t) (z_nn - z0)` with `f(t) = 1 - e^-t`,
//! so the initial condition holds exactly for any weights.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Dual, DualVar, Program, ProgramBuilder, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{ModelDef, ModelId, ParamVec, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    Softmax,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
    pub output_mode: OutputMode,
    #[serde(default)]
    pub hidden_activation: Activation,
}

impl NetConfig {
    /// Two tanh layers of 64 units, softmax output.
    pub fn for_model(model: &ModelDef) -> Self {
        Self {
            input_dim: model.input_dim(),
            hidden_layers: 2,
            hidden_width: 64,
            output_dim: model.n_compartments(),
            output_mode: OutputMode::Softmax,
            hidden_activation: Activation::Tanh,
        }
    }

    pub fn with_hidden(mut self, layers: usize, width: usize) -> Self {
        self.hidden_layers = layers;
        self.hidden_width = width;
        self
    }

    pub fn with_output_mode(mut self, mode: OutputMode) -> Self {
        self.output_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_layers == 0 || self.hidden_width == 0 || self.output_dim == 0 {
            return Err(Error::Config(format!("network dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            shapes.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        shapes.push((fan_in, self.output_dim));
        shapes
    }
}

/// Per-input affine map of `[lo, hi]` onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputScaling {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "scaling bounds length");
        Self { lo, hi }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(vec![-1.0; dim], vec![1.0; dim])
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    /// Slope of input `i`; a degenerate interval maps to the constant 0.
    pub fn factor(&self, i: usize) -> f64 {
        let w = self.hi[i] - self.lo[i];
        if w > 0.0 {
            2.0 / w
        } else {
            0.0
        }
    }

    pub fn offset(&self, i: usize) -> f64 {
        let w = self.hi[i] - self.lo[i];
        if w > 0.0 {
            -1.0 - self.lo[i] * self.factor(i)
        } else {
            0.0
        }
    }

    pub fn apply<T: Real>(&self, raw: &[T]) -> Vec<T> {
        raw.iter()
            .enumerate()
            .map(|(i, &x)| x * T::constant(self.factor(i)) + T::constant(self.offset(i)))
            .collect()
    }

    /// Scaled batch and its derivative with respect to time (input 0).
    pub fn scale_batch(&self, raw: &Tensor) -> (Tensor, Tensor) {
        let x = Tensor::from_fn(raw.rows(), raw.cols(), |i, j| {
            raw.get(i, j) * self.factor(j) + self.offset(j)
        });
        let f0 = self.factor(0);
        let dx = Tensor::from_fn(raw.rows(), raw.cols(), |_, j| if j == 0 { f0 } else { 0.0 });
        (x, dx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_in x fan_out`; activations are `x W + b`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn apply<T: Real>(&self, x: &[T]) -> Vec<T> {
        let mut out: Vec<T> = self.bias.iter().map(|&b| T::constant(b)).collect();
        for (p, &xp) in x.iter().enumerate() {
            let row = &self.weights[p * self.fan_out..(p + 1) * self.fan_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o = *o + xp * T::constant(w);
            }
        }
        out
    }
}

/// `f(t) = 1 - e^-t`.
#[inline]
pub fn constraint(t: f64) -> f64 {
    1.0 - libm::exp(-t)
}

/// `f'(t) = e^-t`.
#[inline]
pub fn constraint_slope(t: f64) -> f64 {
    libm::exp(-t)
}

fn softmax<T: Real>(a: &[T]) -> Vec<T> {
    let shift = a.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<T> = a.iter().map(|&v| (v - T::constant(shift)).exp()).collect();
    let mut s = e[0];
    for &v in &e[1..] {
        s = s + v;
    }
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateNet {
    pub model: ModelId,
    pub config: NetConfig,
    pub scaling: InputScaling,
    pub layers: Vec<Layer>,
}

impl SurrogateNet {
    /// Glorot-uniform weights, zero biases, drawn from a seeded stream.
    pub fn new(model: ModelId, config: NetConfig, scaling: InputScaling, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = Self::checked_shapes(model, &config, &scaling)?
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                let weights = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Layer {
                    fan_in,
                    fan_out,
                    weights,
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            model,
            config,
            scaling,
            layers,
        })
    }

    pub fn zeros(model: ModelId, config: NetConfig, scaling: InputScaling) -> Result<Self> {
        let layers = Self::checked_shapes(model, &config, &scaling)?
            .into_iter()
            .map(|(i, o)| Layer::zeros(i, o))
            .collect();
        Ok(Self {
            model,
            config,
            scaling,
            layers,
        })
    }

    /// Assembles a net from stored layers, validating every shape.
    pub fn from_parts(model: ModelId, config: NetConfig, scaling: InputScaling, layers: Vec<Layer>) -> Result<Self> {
        let shapes = Self::checked_shapes(model, &config, &scaling)?;
        if shapes.len() != layers.len() {
            return Err(Error::Shape(format!(
                "expected {} layers, found {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (k, ((fi, fo), l)) in shapes.iter().zip(&layers).enumerate() {
            if l.fan_in != *fi || l.fan_out != *fo || l.weights.len() != fi * fo || l.bias.len() != *fo {
                return Err(Error::Shape(format!(
                    "layer {k}: expected {fi}x{fo}, found {}x{} with {} weights and {} biases",
                    l.fan_in,
                    l.fan_out,
                    l.weights.len(),
                    l.bias.len()
                )));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("layer {k} holds non-finite weights")));
            }
        }
        Ok(Self {
            model,
            config,
            scaling,
            layers,
        })
    }

    fn checked_shapes(model: ModelId, config: &NetConfig, scaling: &InputScaling) -> Result<Vec<(usize, usize)>> {
        config.validate()?;
        let def = ModelDef::new(model);
        if config.input_dim != def.input_dim() || config.output_dim != def.n_compartments() {
            return Err(Error::Shape(format!(
                "{model} needs input_dim {} and output_dim {}, config has {} and {}",
                def.input_dim(),
                def.n_compartments(),
                config.input_dim,
                config.output_dim
            )));
        }
        if scaling.len() != config.input_dim {
            return Err(Error::Shape(format!(
                "input scaling covers {} inputs, network has {}",
                scaling.len(),
                config.input_dim
            )));
        }
        Ok(config.layer_shapes())
    }

    pub fn model_def(&self) -> ModelDef {
        ModelDef::new(self.model)
    }

    pub fn scaling(&self) -> &InputScaling {
        &self.scaling
    }

    pub fn check_model(&self, model: &ModelDef) -> Result<()> {
        if self.model != model.id || self.config.output_dim != model.n_compartments() {
            return Err(Error::Shape(format!(
                "network built for {} with {} outputs cannot serve {}",
                self.model, self.config.output_dim, model.id
            )));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Weights then bias, layer by layer (the tape registration order).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "parameter vector length");
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }

    /// Unscaled input vector `[t, z0[1..], theta]`.
    pub fn raw_input(&self, t: f64, z0: &[f64], theta: ParamVec) -> Result<Vec<f64>> {
        let def = self.model_def();
        if z0.len() != def.n_compartments() {
            return Err(Error::Shape(format!(
                "{} expects a {}-compartment state, got {}",
                self.model,
                def.n_compartments(),
                z0.len()
            )));
        }
        let mut x = Vec::with_capacity(self.config.input_dim);
        x.push(t);
        x.extend_from_slice(&z0[1..]);
        x.extend_from_slice(&theta.as_array());
        Ok(x)
    }

    /// Network output for already-scaled inputs.
    pub fn forward_scaled<T: Real>(&self, x: &[T]) -> Vec<T> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if k < last {
                h = h.into_iter().map(Real::tanh).collect();
            }
        }
        match self.config.output_mode {
            OutputMode::Softmax => softmax(&h),
            OutputMode::Identity => h,
        }
    }

    /// `z_nn(t, z0, theta)` before the initial-condition constraint.
    pub fn raw_forward(&self, t: f64, z0: &[f64], theta: ParamVec) -> Result<Vec<f64>> {
        let x = self.raw_input(t, z0, theta)?;
        Ok(self.forward_scaled(&self.scaling.apply(&x)))
    }

    /// `z0 + f(t) (z_nn - z0)`.
    pub fn constrained_forward(&self, t: f64, z0: &[f64], theta: ParamVec) -> Result<Vec<f64>> {
        let z_nn = self.raw_forward(t, z0, theta)?;
        let f = constraint(t);
        Ok(z0.iter().zip(&z_nn).map(|(&a, &b)| a + f * (b - a)).collect())
    }

    /// Constrained state and its exact time derivative, by forward mode with
    /// time as the seeded input.
    pub fn constrained_with_derivative(&self, t: f64, z0: &[f64], theta: ParamVec) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.raw_input(t, z0, theta)?;
        let duals: Vec<Dual> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| if i == 0 { Dual::seed(v) } else { Dual::constant(v) })
            .collect();
        let z_nn = self.forward_scaled(&self.scaling.apply(&duals));
        let tt = Dual::seed(t);
        let f = Dual::constant(1.0) - (-tt).exp();
        let (value, tangent) = z0
            .iter()
            .zip(&z_nn)
            .map(|(&a, &b)| {
                let a = Dual::constant(a);
                let z = a + f * (b - a);
                (z.value, z.tangent)
            })
            .unzip();
        Ok((value, tangent))
    }

    pub fn time_derivative(&self, t: f64, z0: &[f64], theta: ParamVec) -> Result<Vec<f64>> {
        Ok(self.constrained_with_derivative(t, z0, theta)?.1)
    }

    /// Pointwise ODE residual `dz/dt - g(z, theta)`.
    pub fn residual_at(&self, model: &ModelDef, t: f64, z0: &[f64], theta: ParamVec) -> Result<Vec<f64>> {
        let (z, dz) = self.constrained_with_derivative(t, z0, theta)?;
        let g = model.vector_field(&mut Scalar, &z, &theta.as_array());
        Ok(dz.iter().zip(&g).map(|(a, b)| a - b).collect())
    }

    /// The raw network over unscaled inputs as a scalar [`Program`].
    pub fn to_program(&self) -> Program {
        let mut b = ProgramBuilder::new(self.config.input_dim);
        let mut h: Vec<_> = (0..self.config.input_dim)
            .map(|i| {
                let x = b.input(i);
                let s = b.constant(self.scaling.factor(i));
                let o = b.constant(self.scaling.offset(i));
                let xs = b.mul(x, s);
                b.add(xs, o)
            })
            .collect();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(layer.fan_out);
            for j in 0..layer.fan_out {
                let mut acc = b.constant(layer.bias[j]);
                for (p, &hp) in h.iter().enumerate() {
                    let w = b.constant(layer.weights[p * layer.fan_out + j]);
                    let term = b.mul(hp, w);
                    acc = b.add(acc, term);
                }
                next.push(if k < last { b.tanh(acc) } else { acc });
            }
            h = next;
        }
        let out = match self.config.output_mode {
            OutputMode::Softmax => b.softmax(&h),
            OutputMode::Identity => h,
        };
        b.build(&out)
    }

    /// Puts the layers on `tape` as parameters (`trainable`) or constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| {
                let w = Tensor::new(l.fan_in, l.fan_out, l.weights.clone());
                let b = Tensor::row(l.bias.clone());
                if trainable {
                    (tape.param(w), tape.param(b))
                } else {
                    (tape.constant(w), tape.constant(b))
                }
            })
            .collect()
    }

    /// Raw `n x input_dim` batch from times and per-row free inits / params.
    pub fn batch_inputs(&self, times: &[f64], init: &Tensor, params: &Tensor) -> Tensor {
        let nf = init.cols();
        Tensor::from_fn(times.len(), self.config.input_dim, |i, j| {
            if j == 0 {
                times[i]
            } else if j <= nf {
                init.get(i, j - 1)
            } else {
                params.get(i, j - 1 - nf)
            }
        })
    }

    /// Records `z_nn` for a scaled dual input batch.
    pub fn record_raw(&self, tape: &mut Tape, weights: &[(Var, Var)], input: DualVar) -> DualVar {
        let rows = tape.value(input.value).rows();
        let last = weights.len() - 1;
        let mut h = input;
        for (k, &(w, b)) in weights.iter().enumerate() {
            let lin = tape.dual_matmul(h, DualVar::constant(w));
            let bias = tape.broadcast_rows(b, rows);
            let pre = tape.dual_add(lin, DualVar::constant(bias));
            h = if k < last { tape.dual_tanh(pre) } else { pre };
        }
        match self.config.output_mode {
            OutputMode::Softmax => tape.dual_softmax_rows(h),
            OutputMode::Identity => h,
        }
    }

    /// Records the constrained state and its time derivative for a batch.
    ///
    /// `z0` is `n x d` and must not depend on time.
    pub fn record_constrained(
        &self,
        tape: &mut Tape,
        weights: &[(Var, Var)],
        times: &[f64],
        z0: DualVar,
        input: DualVar,
    ) -> (Var, Var) {
        let d = self.config.output_dim;
        let z_nn = self.record_raw(tape, weights, input);
        let f = tape.constant(Tensor::from_fn(times.len(), d, |i, _| constraint(times[i])));
        let fp = tape.constant(Tensor::from_fn(times.len(), d, |i, _| constraint_slope(times[i])));
        let diff = tape.dual_sub(z_nn, z0);
        let scaled = tape.mul(f, diff.value);
        let zhat = tape.add(z0.value, scaled);
        let slope_term = tape.mul(fp, diff.value);
        let dzhat = match diff.tangent {
            Some(t) => {
                let ft = tape.mul(f, t);
                tape.add(slope_term, ft)
            }
            None => slope_term,
        };
        (zhat, dzhat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standard_scaling() -> InputScaling {
        InputScaling::new(vec![0.0, 0.2, 0.1, 0.4, 0.3], vec![20.0, 0.4, 0.3, 0.8, 0.7])
    }

    fn sir_net(seed: u64) -> SurrogateNet {
        let cfg = NetConfig::for_model(&ModelDef::SIR).with_hidden(2, 8);
        SurrogateNet::new(ModelId::Sir, cfg, standard_scaling(), seed).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let cfg = NetConfig::for_model(&ModelDef::SIR);
        let net = SurrogateNet::zeros(ModelId::Sir, cfg.clone(), standard_scaling()).unwrap();
        let out = net.raw_forward(3.0, &[0.5, 0.3, 0.2], ParamVec::new(0.6, 0.4)).unwrap();
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-16);
        }
        let net = SurrogateNet::zeros(ModelId::Sir, cfg.with_output_mode(OutputMode::Identity), standard_scaling()).unwrap();
        let out = net.raw_forward(3.0, &[0.5, 0.3, 0.2], ParamVec::new(0.6, 0.4)).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn initial_condition_is_exact() {
        let net = sir_net(3);
        let z0 = [0.4, 0.35, 0.25];
        let z = net.constrained_forward(0.0, &z0, ParamVec::new(0.5, 0.5)).unwrap();
        assert_eq!(z, z0.to_vec());
    }

    #[test]
    fn half_way_at_ln2() {
        let net = sir_net(4);
        let z0 = [0.5, 0.3, 0.2];
        let theta = ParamVec::new(0.7, 0.35);
        let t = core::f64::consts::LN_2;
        let z_nn = net.raw_forward(t, &z0, theta).unwrap();
        let z = net.constrained_forward(t, &z0, theta).unwrap();
        for k in 0..3 {
            let expected = z0[k] + 0.5 * (z_nn[k] - z0[k]);
            assert!((z[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn derivative_at_zero_is_pull_towards_network() {
        let net = sir_net(5);
        let z0 = [0.5, 0.3, 0.2];
        let theta = ParamVec::new(0.7, 0.35);
        let z_nn = net.raw_forward(0.0, &z0, theta).unwrap();
        let dz = net.time_derivative(0.0, &z0, theta).unwrap();
        for k in 0..3 {
            assert!((dz[k] - (z_nn[k] - z0[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_net_at_uniform_state_is_stationary() {
        let cfg = NetConfig::for_model(&ModelDef::SIR);
        let net = SurrogateNet::zeros(ModelId::Sir, cfg, standard_scaling()).unwrap();
        let z0 = [1.0 / 3.0; 3];
        for t in [0.0, 0.5, 7.0, 20.0] {
            let dz = net.time_derivative(t, &z0, ParamVec::new(0.6, 0.4)).unwrap();
            assert!(dz.iter().all(|v| v.abs() < 1e-16), "{dz:?}");
        }
    }

    #[test]
    fn wrong_state_length_is_a_shape_error() {
        let net = sir_net(1);
        assert!(matches!(
            net.raw_forward(1.0, &[0.5, 0.5], ParamVec::new(0.6, 0.4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let cfg = NetConfig::for_model(&ModelDef::SIRP);
        assert!(SurrogateNet::new(ModelId::Sir, cfg, standard_scaling(), 0).is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut net = sir_net(9);
        let p = net.flat_params();
        assert_eq!(p.len(), net.n_params());
        let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        net.set_flat_params(&doubled);
        assert_eq!(net.flat_params(), doubled);
    }

    #[test]
    fn program_matches_direct_forward() {
        let net = sir_net(11);
        let prog = net.to_program();
        let z0 = [0.45, 0.3, 0.25];
        let theta = ParamVec::new(0.55, 0.45);
        let x = net.raw_input(6.5, &z0, theta).unwrap();
        let a = prog.evaluate(&x).unwrap();
        let b = net.raw_forward(6.5, &z0, theta).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn batched_tape_forward_matches_scalar_path() {
        let net = sir_net(12);
        let times = vec![0.0, 1.5, 9.0];
        let init = Tensor::new(3, 2, vec![0.2, 0.1, 0.3, 0.25, 0.4, 0.3]);
        let params = Tensor::new(3, 2, vec![0.4, 0.3, 0.6, 0.5, 0.8, 0.7]);
        let model = ModelDef::SIR;
        let mut tape = Tape::new();
        let w = net.register(&mut tape, false);
        let raw = net.batch_inputs(&times, &init, &params);
        let (x, dx) = net.scaling().scale_batch(&raw);
        let input = DualVar {
            value: tape.constant(x),
            tangent: Some(tape.constant(dx)),
        };
        let z0t = Tensor::from_fn(3, 3, |i, j| model.full_state(init.row_slice(i))[j]);
        let z0 = tape.constant(z0t);
        let (zhat, dzhat) = net.record_constrained(&mut tape, &w, &times, DualVar::constant(z0), input);
        for i in 0..3 {
            let z0i = model.full_state(init.row_slice(i));
            let theta = ParamVec::new(params.get(i, 0), params.get(i, 1));
            let (z, dz) = net.constrained_with_derivative(times[i], &z0i, theta).unwrap();
            for k in 0..3 {
                assert!((tape.value(zhat).get(i, k) - z[k]).abs() < 1e-15);
                assert!((tape.value(dzhat).get(i, k) - dz[k]).abs() < 1e-15);
            }
        }
    }
}
