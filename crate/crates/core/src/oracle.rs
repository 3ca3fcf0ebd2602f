//! Fixed-step classical Runge-Kutta integrator used as ground truth.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelDef, ParamVec};
use crate::obs::{ObservationSeries, ObservedSeries, Split};

/// Default internal step, in model time units.
pub const DEFAULT_STEP: f64 = 1e-2;

const RANGE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub compartments: Vec<alloc::string::String>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `dz/dt` at each stored point, for Hermite interpolation. Empty when
    /// the trajectory did not come from the integrator.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slopes: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn compartment(&self, k: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[k]).collect()
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("non-empty trajectory")
    }

    /// State at `t` inside the stored range: exact on stored points, cubic
    /// Hermite between them (linear when no slopes are stored).
    pub fn at(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.states[n - 1].clone();
        }
        let j = self.times.partition_point(|&x| x <= t);
        let i = j - 1;
        let (t0, t1) = (self.times[i], self.times[j]);
        if t == t0 {
            return self.states[i].clone();
        }
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (a, b) = (&self.states[i], &self.states[j]);
        if self.slopes.len() == n {
            let (da, db) = (&self.slopes[i], &self.slopes[j]);
            let s2 = s * s;
            let s3 = s2 * s;
            let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
            let h10 = s3 - 2.0 * s2 + s;
            let h01 = -2.0 * s3 + 3.0 * s2;
            let h11 = s3 - s2;
            (0..a.len())
                .map(|k| h00 * a[k] + h10 * h * da[k] + h01 * b[k] + h11 * h * db[k])
                .collect()
        } else {
            (0..a.len()).map(|k| a[k] + s * (b[k] - a[k])).collect()
        }
    }

    /// Largest `|sum z - 1|` along the trajectory.
    pub fn max_conservation_error(&self) -> f64 {
        self.states
            .iter()
            .map(|s| libm::fabs(s.iter().sum::<f64>() - 1.0))
            .fold(0.0, f64::max)
    }
}

fn rk4_step(model: &ModelDef, z: &[f64], theta: ParamVec, h: f64) -> Vec<f64> {
    let k1 = model.rhs(z, theta);
    let y: Vec<f64> = z.iter().zip(&k1).map(|(a, k)| a + 0.5 * h * k).collect();
    let k2 = model.rhs(&y, theta);
    let y: Vec<f64> = z.iter().zip(&k2).map(|(a, k)| a + 0.5 * h * k).collect();
    let k3 = model.rhs(&y, theta);
    let y: Vec<f64> = z.iter().zip(&k3).map(|(a, k)| a + h * k).collect();
    let k4 = model.rhs(&y, theta);
    (0..z.len())
        .map(|i| z[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

fn check_range(t: f64, z: &[f64]) -> Result<()> {
    if z.iter().any(|&v| !(-RANGE_TOL..=1.0 + RANGE_TOL).contains(&v)) {
        return Err(Error::StateOutOfRange { t, state: z.to_vec() });
    }
    Ok(())
}

/// Integrates from `t_grid[0]` and reports the state at every grid time,
/// using at most [`DEFAULT_STEP`] between internal steps.
pub fn integrate(model: &ModelDef, z0: &[f64], theta: ParamVec, t_grid: &[f64]) -> Result<Trajectory> {
    integrate_with_step(model, z0, theta, t_grid, DEFAULT_STEP)
}

/// As [`integrate`] with an explicit maximum step. Each grid interval is cut
/// into equal sub-steps so grid times are hit exactly.
pub fn integrate_with_step(
    model: &ModelDef,
    z0: &[f64],
    theta: ParamVec,
    t_grid: &[f64],
    max_step: f64,
) -> Result<Trajectory> {
    if t_grid.is_empty() {
        return Err(Error::Config("time grid is empty".into()));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("time grid must be strictly increasing".into()));
    }
    if !(max_step > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {max_step}")));
    }
    if z0.len() != model.n_compartments() {
        return Err(Error::Shape(format!(
            "{} needs {} compartments, got {}",
            model.id,
            model.n_compartments(),
            z0.len()
        )));
    }
    check_range(t_grid[0], z0)?;
    let mut z = z0.to_vec();
    let mut states = Vec::with_capacity(t_grid.len());
    let mut slopes = Vec::with_capacity(t_grid.len());
    states.push(z.clone());
    slopes.push(model.rhs(&z, theta));
    for w in t_grid.windows(2) {
        let span = w[1] - w[0];
        let steps = libm::ceil(span / max_step - 1e-9).max(1.0) as usize;
        let h = span / steps as f64;
        for s in 0..steps {
            z = rk4_step(model, &z, theta, h);
            check_range(w[0] + (s + 1) as f64 * h, &z)?;
        }
        slopes.push(model.rhs(&z, theta));
        states.push(z.clone());
    }
    Ok(Trajectory {
        compartments: model.compartments().iter().map(|c| (*c).into()).collect(),
        times: t_grid.to_vec(),
        states,
        slopes,
    })
}

/// `n` equally spaced points over `[start, end]`, endpoints included.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => alloc::vec![start],
        _ => {
            let h = (end - start) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { end } else { start + i as f64 * h })
                .collect()
        }
    }
}

/// Every internal step kept: the grid is `0, h, 2h, ..., t_end`.
pub fn integrate_dense(model: &ModelDef, z0: &[f64], theta: ParamVec, t_end: f64, step: f64) -> Result<Trajectory> {
    let n = libm::ceil(t_end / step - 1e-9).max(1.0) as usize;
    integrate_with_step(model, z0, theta, &linspace(0.0, t_end, n + 1), step)
}

/// `n_points` equally spaced samples over the trajectory's time range, all
/// compartments observed and tagged as training points. Gaussian noise of
/// standard deviation `noise_sd` is added and clipped to `[0, 1]`.
pub fn sample_observations(traj: &Trajectory, n_points: usize, noise_sd: f64, seed: u64) -> Result<ObservationSeries> {
    if n_points < 2 {
        return Err(Error::Config(format!("need at least 2 sample points, got {n_points}")));
    }
    if n_points > traj.len() {
        return Err(Error::Config(format!(
            "{n_points} samples exceed the trajectory resolution of {} points",
            traj.len()
        )));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(Error::Config(format!("noise standard deviation must be >= 0, got {noise_sd}")));
    }
    let times = linspace(traj.t_start(), traj.t_end(), n_points);
    let states: Vec<Vec<f64>> = times.iter().map(|&t| traj.at(t)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = if noise_sd > 0.0 {
        Some(Normal::new(0.0, noise_sd).map_err(|e| Error::Config(format!("{e}")))?)
    } else {
        None
    };
    let series = traj
        .compartments
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let values = states
                .iter()
                .map(|s| match &normal {
                    Some(d) => (s[k] + d.sample(&mut rng)).clamp(0.0, 1.0),
                    None => s[k],
                })
                .collect();
            ObservedSeries {
                name: name.clone(),
                values,
            }
        })
        .collect();
    Ok(ObservationSeries {
        split: alloc::vec![Split::Train; times.len()],
        times,
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrium_stays_put() {
        let traj = integrate(&ModelDef::SIR, &[1.0, 0.0, 0.0], ParamVec::new(0.6, 0.4), &linspace(0.0, 20.0, 21)).unwrap();
        for s in &traj.states {
            assert_eq!(s, &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn no_recovery_freezes_removed() {
        let traj = integrate(&ModelDef::SIR, &[0.6, 0.3, 0.1], ParamVec::new(0.6, 0.0), &linspace(0.0, 10.0, 11)).unwrap();
        for s in &traj.states {
            assert_eq!(s[2], 0.1);
        }
    }

    #[test]
    fn rejects_bad_grids_and_states() {
        let th = ParamVec::new(0.6, 0.4);
        assert!(integrate(&ModelDef::SIR, &[0.5, 0.3, 0.2], th, &[0.0, 1.0, 1.0]).is_err());
        assert!(matches!(
            integrate(&ModelDef::SIR, &[1.5, -0.3, -0.2], th, &[0.0, 1.0]),
            Err(Error::StateOutOfRange { .. })
        ));
    }

    #[test]
    fn twenty_samples_over_twenty_units() {
        let traj = integrate_dense(&ModelDef::SIR, &[0.5, 0.3, 0.2], ParamVec::new(0.6, 0.4), 20.0, DEFAULT_STEP).unwrap();
        let obs = sample_observations(&traj, 20, 0.0, 0).unwrap();
        assert_eq!(obs.times.len(), 20);
        for (k, &t) in obs.times.iter().enumerate() {
            assert!((t - 20.0 * k as f64 / 19.0).abs() < 1e-12);
        }
        assert_eq!(obs.times[19], 20.0);
        let at_end = traj.at(20.0);
        assert_eq!(obs.series[1].values[19], at_end[1]);
    }

    #[test]
    fn sampling_is_seeded() {
        let traj = integrate_dense(&ModelDef::SIR, &[0.5, 0.3, 0.2], ParamVec::new(0.6, 0.4), 20.0, DEFAULT_STEP).unwrap();
        let a = sample_observations(&traj, 20, 0.01, 42).unwrap();
        let b = sample_observations(&traj, 20, 0.01, 42).unwrap();
        let c = sample_observations(&traj, 20, 0.01, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.series.iter().all(|s| s.values.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn too_many_samples_rejected() {
        let traj = integrate(&ModelDef::SIR, &[0.5, 0.3, 0.2], ParamVec::new(0.6, 0.4), &linspace(0.0, 1.0, 5)).unwrap();
        assert!(sample_observations(&traj, 6, 0.0, 0).is_err());
        assert!(sample_observations(&traj, 1, 0.0, 0).is_err());
    }

    #[test]
    fn hermite_is_exact_on_nodes() {
        let traj = integrate(&ModelDef::SIR, &[0.5, 0.3, 0.2], ParamVec::new(0.6, 0.4), &linspace(0.0, 4.0, 9)).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states) {
            assert_eq!(&traj.at(*t), s);
        }
    }
}
