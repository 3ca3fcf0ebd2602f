//! Bundles (boxes of initial conditions and parameters) and collocation sampling.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::models::{CollocationBatch, ModelDef};
use crate::net::InputScaling;
use crate::oracle::linspace;

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Interval { lo: v[0], hi: v[1] }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// Training domain of a surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    /// One interval per free initial condition, in model order.
    pub init: Vec<Interval>,
    /// One interval per parameter (`beta`, `gamma`).
    pub params: Vec<Interval>,
    pub time_range: Interval,
}

impl BundleSpec {
    /// SIR bundle: `I0 in [0.2, 0.4]`, `R0 in [0.1, 0.3]`,
    /// `beta in [0.4, 0.8]`, `gamma in [0.3, 0.7]`, `t in [0, 20]`.
    pub fn standard_sir() -> Self {
        Self {
            init: alloc::vec![Interval::new(0.2, 0.4), Interval::new(0.1, 0.3)],
            params: alloc::vec![Interval::new(0.4, 0.8), Interval::new(0.3, 0.7)],
            time_range: Interval::new(0.0, 20.0),
        }
    }

    /// Narrower SIR bundle around the same center, for quick runs.
    pub fn reduced_sir() -> Self {
        Self {
            init: alloc::vec![Interval::new(0.25, 0.35), Interval::new(0.15, 0.25)],
            params: alloc::vec![Interval::new(0.5, 0.7), Interval::new(0.35, 0.55)],
            time_range: Interval::new(0.0, 20.0),
        }
    }

    /// SIRP bundle for lockdown-period country fits. `I0` and `R0` come from
    /// data and are small; most of the population is passive.
    pub fn covid_sirp() -> Self {
        Self {
            init: alloc::vec![Interval::new(0.0, 0.005), Interval::new(0.0, 0.005), Interval::new(0.80, 0.99)],
            params: alloc::vec![Interval::new(0.2, 3.0), Interval::new(0.05, 1.0)],
            time_range: Interval::new(0.0, 20.0),
        }
    }

    /// Named preset: `standard` and `reduced` (SIR), `covid` (SIRP).
    pub fn preset(name: &str) -> Option<(crate::models::ModelId, Self)> {
        use crate::models::ModelId;
        match name {
            "standard" => Some((ModelId::Sir, Self::standard_sir())),
            "reduced" => Some((ModelId::Sir, Self::reduced_sir())),
            "covid" => Some((ModelId::Sirp, Self::covid_sirp())),
            _ => None,
        }
    }

    pub fn t_max(&self) -> f64 {
        self.time_range.hi
    }

    /// All intervals in fitter order: free initial conditions, then parameters.
    pub fn intervals(&self) -> Vec<Interval> {
        self.init.iter().chain(&self.params).copied().collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.intervals().iter().map(Interval::center).collect()
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        self.intervals().iter().zip(values).all(|(i, &v)| i.contains(v))
    }

    pub fn validate(&self, model: &ModelDef) -> Result<()> {
        if self.init.len() != model.n_free() || self.params.len() != model.n_params() {
            return Err(Error::Config(format!(
                "{} bundle needs {} initial-condition and {} parameter intervals, got {} and {}",
                model.id,
                model.n_free(),
                model.n_params(),
                self.init.len(),
                self.params.len()
            )));
        }
        for (name, i) in model.quantities().iter().zip(self.intervals()) {
            if !(i.lo <= i.hi) || !i.lo.is_finite() || !i.hi.is_finite() {
                return Err(Error::Config(format!("interval for {name} is not ordered: [{}, {}]", i.lo, i.hi)));
            }
        }
        for (name, i) in model.free_init().iter().zip(&self.init) {
            if i.lo < 0.0 || i.hi > 1.0 {
                return Err(Error::Config(format!("{name} interval [{}, {}] leaves [0, 1]", i.lo, i.hi)));
            }
        }
        for (name, i) in model.params().iter().zip(&self.params) {
            if !(i.lo > 0.0) {
                return Err(Error::Config(format!("{name} interval must be positive, got [{}, {}]", i.lo, i.hi)));
            }
        }
        let max_sum: f64 = self.init.iter().map(|i| i.hi).sum();
        if max_sum > 1.0 {
            return Err(Error::Config(format!(
                "initial-condition maxima sum to {max_sum} > 1; S0 could go negative"
            )));
        }
        let t = self.time_range;
        if t.lo != 0.0 || !(t.hi > 0.0) {
            return Err(Error::Config(format!("time range must be [0, T] with T > 0, got [{}, {}]", t.lo, t.hi)));
        }
        Ok(())
    }

    /// Input normalization: time over the time range, every other input over
    /// its interval.
    pub fn scaling(&self) -> InputScaling {
        let all = core::iter::once(self.time_range).chain(self.intervals());
        let (lo, hi) = all.map(|i| (i.lo, i.hi)).unzip();
        InputScaling::new(lo, hi)
    }
}

/// Equally spaced grid on `[0, T]` with uniform jitter in
/// `±perturbation`, clipped to the range, and one independent `(z0, theta)`
/// draw per point.
pub fn sample_batch<R: Rng + ?Sized>(
    bundle: &BundleSpec,
    model: &ModelDef,
    n: usize,
    perturbation: f64,
    rng: &mut R,
) -> CollocationBatch {
    let t_max = bundle.t_max();
    let mut times = linspace(0.0, t_max, n);
    if perturbation > 0.0 {
        for t in &mut times {
            let jitter = rng.random_range(-perturbation..=perturbation);
            *t = (*t + jitter).clamp(0.0, t_max);
        }
    }
    let nf = model.n_free();
    let np = model.n_params();
    let mut init = Vec::with_capacity(n * nf);
    let mut params = Vec::with_capacity(n * np);
    for _ in 0..n {
        // Redraw until the derived susceptible fraction is non-negative.
        loop {
            let draw: Vec<f64> = bundle.init.iter().map(|i| i.sample(rng)).collect();
            if draw.iter().sum::<f64>() <= 1.0 {
                init.extend(draw);
                break;
            }
        }
        params.extend(bundle.params.iter().map(|i| i.sample(rng)));
    }
    CollocationBatch {
        times,
        init: Tensor::new(n, nf, init),
        params: Tensor::new(n, np, params),
    }
}
