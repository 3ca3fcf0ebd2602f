use episurr_core::bundle::BundleSpec;
use episurr_core::fit::{fit, forecast, FitConfig};
use episurr_core::models::{ModelDef, ParamVec};
use episurr_core::net::{NetConfig, SurrogateNet};
use episurr_core::oracle::{integrate, integrate_dense, sample_observations};
use episurr_core::train::{train, validate_against_oracle, TrainConfig};

fn reduced() -> (SurrogateNet, BundleSpec) {
    let bundle = BundleSpec::reduced_sir();
    let cfg = TrainConfig {
        n_collocation: 500,
        iterations: 3000,
        learning_rate: 1e-2,
        seed: 0,
        ..TrainConfig::default()
    };
    let net_cfg = NetConfig::for_model(&ModelDef::SIR).with_hidden(1, 32);
    let (net, report) = train(&ModelDef::SIR, &bundle, &net_cfg, &cfg, &mut |_, _| {}).unwrap();
    assert_eq!(report.loss_trace.len(), 3000);
    assert!(report.loss_trace.iter().all(|l| l.is_finite()));
    assert!(report.validation_max_abs_error <= 5e-2, "{}", report.validation_max_abs_error);
    (net, bundle)
}

#[test]
fn reduced_training_fits_and_forecasts() {
    let (net, bundle) = reduced();
    let model = ModelDef::SIR;
    assert!(validate_against_oracle(&net, &model, &bundle, 10, 99).unwrap() <= 5e-2);

    let truth = ParamVec::new(0.6, 0.4);
    let z0 = model.full_state(&[0.3, 0.2]);
    let traj = integrate_dense(&model, &z0, truth, 20.0, 1e-2).unwrap();
    let obs = sample_observations(&traj, 20, 0.0, 0).unwrap().with_chronological_split(0.8);
    let r = fit(&net, &model, &bundle, &obs, &FitConfig::default()).unwrap();
    assert!(r.val_loss.unwrap() <= 2.0 * r.train_loss.max(1e-8) || r.val_loss.unwrap() < 1e-5);
    assert!((r.theta.beta / truth.beta - 1.0).abs() < 0.1, "{:?}", r.theta);
    assert!((r.theta.gamma / truth.gamma - 1.0).abs() < 0.1, "{:?}", r.theta);
    assert!((r.r0 - r.theta.beta / r.theta.gamma).abs() < 1e-15);

    let long = forecast(&r, &net, 40.0, 0.1).unwrap();
    assert!((long.t_end() - 40.0).abs() < 1e-12);
    let oracle = integrate(&model, &z0, truth, &long.times).unwrap();
    let err = long
        .states
        .iter()
        .zip(&oracle.states)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    assert!(err <= 5e-2, "{err}");
    // Stitch continuity at the end of the trained range.
    let at_t = net.constrained_forward(20.0, &r.z0, r.theta).unwrap();
    let i = long.times.iter().position(|&t| t == 20.0).unwrap();
    assert!(at_t.iter().zip(&long.states[i]).all(|(a, b)| (a - b).abs() < 1e-6));
}
