use episurr_core::models::{ModelDef, ParamVec};
use episurr_core::oracle::{integrate, integrate_dense, integrate_with_step, linspace, sample_observations};
use proptest::prelude::*;

fn sir_reference() -> (Vec<f64>, ParamVec) {
    (vec![0.5, 0.3, 0.2], ParamVec::new(0.6, 0.4))
}

fn max_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn fourth_order_self_convergence() {
    let (z0, theta) = sir_reference();
    let grid = linspace(0.0, 20.0, 21);
    // Coarse steps keep the error far above rounding; h divides the grid spacing.
    let h = 0.5;
    let reference = integrate_with_step(&ModelDef::SIR, &z0, theta, &grid, h / 16.0).unwrap();
    let coarse = integrate_with_step(&ModelDef::SIR, &z0, theta, &grid, h).unwrap();
    let fine = integrate_with_step(&ModelDef::SIR, &z0, theta, &grid, h / 2.0).unwrap();
    let factor = max_err(&coarse.states, &reference.states) / max_err(&fine.states, &reference.states);
    assert!((factor - 16.0).abs() <= 0.2 * 16.0, "factor {factor}");
}

#[test]
fn conservation_along_default_trajectory() {
    let (z0, theta) = sir_reference();
    let t = integrate_dense(&ModelDef::SIR, &z0, theta, 20.0, 1e-2).unwrap();
    assert_eq!(t.len(), 2001);
    assert!(t.max_conservation_error() < 1e-9);
}

#[test]
fn disease_free_equilibrium_is_constant() {
    let t = integrate(&ModelDef::SIR, &[1.0, 0.0, 0.0], ParamVec::new(0.7, 0.3), &linspace(0.0, 20.0, 11)).unwrap();
    for s in &t.states {
        assert_eq!(s, &[1.0, 0.0, 0.0]);
    }
}

#[test]
fn zero_recovery_rate_freezes_removed() {
    let t = integrate(&ModelDef::SIR, &[0.5, 0.3, 0.2], ParamVec::new(0.6, 0.0), &linspace(0.0, 10.0, 11)).unwrap();
    for s in &t.states {
        assert_eq!(s[2], 0.2);
    }
}

#[test]
fn invalid_state_is_rejected() {
    assert!(integrate(&ModelDef::SIR, &[1.2, -0.2, 0.0], ParamVec::new(0.6, 0.4), &[0.0, 1.0]).is_err());
    assert!(integrate(&ModelDef::SIR, &[0.5, 0.3, 0.2], ParamVec::new(0.6, 0.4), &[0.0, 2.0, 1.0]).is_err());
}

#[test]
fn twenty_samples_on_standard_grid() {
    let (z0, theta) = sir_reference();
    let traj = integrate_dense(&ModelDef::SIR, &z0, theta, 20.0, 1e-2).unwrap();
    let obs = sample_observations(&traj, 20, 0.0, 1).unwrap();
    let expected = linspace(0.0, 20.0, 20);
    assert_eq!(obs.times, expected);
    assert_eq!(obs.times[1], 20.0 / 19.0);
    // Noise-free samples equal the trajectory there.
    let direct = integrate(&ModelDef::SIR, &z0, theta, &expected).unwrap();
    for (k, s) in obs.series.iter().enumerate() {
        for (i, v) in s.values.iter().enumerate() {
            assert!((v - direct.states[i][k]).abs() < 1e-9);
        }
    }
    assert_eq!(sample_observations(&traj, 20, 1e-3, 9).unwrap(), sample_observations(&traj, 20, 1e-3, 9).unwrap());
    assert!(sample_observations(&traj, 1, 0.0, 0).is_err());
    assert!(sample_observations(&traj, 5000, 0.0, 0).is_err());
    assert!(sample_observations(&traj, 20, -1.0, 0).is_err());
}

#[test]
fn exact_trajectory_has_negligible_residual() {
    let model = ModelDef::SIR;
    let (z0, theta) = sir_reference();
    let traj = integrate_dense(&model, &z0, theta, 20.0, 1e-2).unwrap();
    let h = 1e-4;
    let times = linspace(0.05, 19.95, 400);
    let mut total = 0.0;
    for &t in &times {
        let zp = traj.at(t + h);
        let zm = traj.at(t - h);
        let z = traj.at(t);
        let g = model.rhs(&z, theta);
        total += (0..3).map(|k| ((zp[k] - zm[k]) / (2.0 * h) - g[k]).powi(2)).sum::<f64>();
    }
    assert!(total / (times.len() as f64) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn monotone_and_conservative(i0 in 0.0f64..0.5, r0 in 0.0f64..0.4, p0 in 0.0f64..0.1, beta in 0.05f64..1.5, gamma in 0.05f64..1.0) {
        let model = ModelDef::SIRP;
        let z0 = model.full_state(&[i0, r0, p0]);
        let t = integrate(&model, &z0, ParamVec::new(beta, gamma), &linspace(0.0, 20.0, 201)).unwrap();
        prop_assert!(t.max_conservation_error() < 1e-9);
        for w in t.states.windows(2) {
            prop_assert!(w[1][0] <= w[0][0] + 1e-15);
            prop_assert!(w[1][2] >= w[0][2] - 1e-15);
            prop_assert!((w[1][3] - z0[3]).abs() < 1e-12);
        }
    }
}
