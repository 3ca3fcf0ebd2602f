use episurr_core::diff::{forward_with_tangent, program_gradient, Dual, Program, ProgramBuilder, Real, Tape, Tensor};
use episurr_core::DiffError;
use episurr_core::gradcheck::{self, Scope};
use episurr_core::models::{ModelDef, ModelId, ParamVec};
use episurr_core::net::{NetConfig, SurrogateNet};
use episurr_core::bundle::BundleSpec;
use proptest::prelude::*;

fn ulps(a: f64, b: f64) -> u64 {
    fn ordered(x: f64) -> i64 {
        let i = x.to_bits() as i64;
        if i < 0 { i64::MIN - i } else { i }
    }
    ordered(a).abs_diff(ordered(b))
}

/// Two inputs, two tanh layers of width 4, scalar output.
fn tanh_program(w: &[f64]) -> Program {
    let mut b = ProgramBuilder::new(2);
    let x = [b.input(0), b.input(1)];
    let mut k = 0;
    let mut h: Vec<_> = x.to_vec();
    for _ in 0..2 {
        let mut next = Vec::new();
        for _ in 0..4 {
            let mut acc = b.constant(w[k]);
            k += 1;
            for &hp in &h {
                let c = b.constant(w[k]);
                k += 1;
                let t = b.mul(hp, c);
                acc = b.add(acc, t);
            }
            next.push(b.tanh(acc));
        }
        h = next;
    }
    let mut out = b.constant(0.0);
    for &hp in &h {
        let c = b.constant(w[k]);
        k += 1;
        let t = b.mul(hp, c);
        out = b.add(out, t);
    }
    b.build(&[out])
}

const TANH_WEIGHTS: usize = 4 * 3 + 4 * 5 + 4;

#[test]
fn polynomial_and_constant_tangents() {
    let mut b = ProgramBuilder::new(1);
    let x = b.input(0);
    let y = b.mul(x, x);
    let c = b.constant(2.5);
    let p = b.build(&[y, c]);
    let (v, t) = forward_with_tangent(&p, &[3.0], 0).unwrap();
    assert_eq!(v, [9.0, 2.5]);
    assert_eq!(t, [6.0, 0.0]);
}

#[test]
fn unregistered_primitive_fails_at_construction() {
    let mut b = ProgramBuilder::new(1);
    let x = b.input(0);
    assert!(matches!(b.apply("sin", &[x]), Err(DiffError::UnregisteredPrimitive(_))));
    assert!(matches!(b.apply("exp", &[x, x]), Err(DiffError::Arity { .. })));
}

#[test]
fn nonfinite_intermediate_names_primitive() {
    let mut b = ProgramBuilder::new(1);
    let x = b.input(0);
    let e = b.exp(x);
    let p = b.build(&[e]);
    match forward_with_tangent(&p, &[1000.0], 0) {
        Err(DiffError::NonFinite { primitive, .. }) => assert_eq!(primitive, "exp"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn input_gradient_examples() {
    // (x - 1)^2 at 3 -> 4; stationary at c.
    let mut b = ProgramBuilder::new(1);
    let x = b.input(0);
    let one = b.constant(1.0);
    let d = b.sub(x, one);
    let sq = b.mul(d, d);
    let p = b.build(&[sq]);
    assert_eq!(program_gradient(&p, &[3.0]).unwrap().1, [4.0]);
    assert_eq!(program_gradient(&p, &[1.0]).unwrap().1, [0.0]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let w1 = tape.param(Tensor::scalar(2.0));
    let w2 = tape.param(Tensor::scalar(5.0));
    let y = tape.mul(w1, w2);
    assert_eq!(tape.backward(y).unwrap().into_vec(), [5.0, 2.0]);
    assert_eq!(tape.backward(y), Err(DiffError::TapeConsumed));

    let mut tape = Tape::new();
    let w = tape.param(Tensor::row(vec![1.0, -1.0, 0.0]));
    let sq = tape.square(w);
    let not_scalar = sq;
    assert!(matches!(tape.backward(not_scalar), Err(DiffError::NonScalarOutput { .. })));
    let s = tape.sum_all(sq);
    assert_eq!(tape.backward(s).unwrap().into_vec(), [2.0, -2.0, 0.0]);
}

#[test]
fn tanh_network_tangent_matches_finite_difference() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let w: Vec<f64> = (0..TANH_WEIGHTS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = tanh_program(&w);
        let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        for seed in 0..2 {
            let (_, t) = forward_with_tangent(&p, &x, seed).unwrap();
            let h = 1e-5;
            let mut xp = x;
            let mut xm = x;
            xp[seed] += h;
            xm[seed] -= h;
            let fd = (p.evaluate(&xp).unwrap()[0] - p.evaluate(&xm).unwrap()[0]) / (2.0 * h);
            assert!((t[0] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "{} vs {fd}", t[0]);
        }
    }
}

#[test]
fn surrogate_tangent_matches_finite_difference() {
    let bundle = BundleSpec::standard_sir();
    for seed in 0..10 {
        let net = SurrogateNet::new(ModelId::Sir, NetConfig::for_model(&ModelDef::SIR), bundle.scaling(), seed).unwrap();
        let z0 = [0.5, 0.3, 0.2];
        let theta = ParamVec::new(0.6, 0.4);
        let t = 0.7 + seed as f64;
        let (_, d) = net.constrained_with_derivative(t, &z0, theta).unwrap();
        let h = 1e-6;
        let zp = net.constrained_forward(t + h, &z0, theta).unwrap();
        let zm = net.constrained_forward(t - h, &z0, theta).unwrap();
        for k in 0..3 {
            let fd = (zp[k] - zm[k]) / (2.0 * h);
            assert!((d[k] - fd).abs() <= 1e-6 * d.iter().fold(0.0_f64, |m, v| m.max(v.abs())), "{k}: {} vs {fd}", d[k]);
        }
    }
}

#[test]
fn gradcheck_scopes_pass() {
    for scope in [Scope::Net, Scope::Loss, Scope::Inverse] {
        let r = gradcheck::run(scope, 25, 11, false).unwrap();
        assert!(r.passed, "{scope:?}: {}", r.max_rel_error);
    }
}

proptest! {
    #[test]
    fn chain_rule_within_four_ulps(x in -3.0f64..3.0, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let u = Dual::seed(x) * a + b;
        let uv = x * a + b;

        let e = u.exp();
        prop_assert!(ulps(e.tangent, libm::exp(uv) * a) <= 4);

        let t = u.tanh();
        let th = libm::tanh(uv);
        prop_assert!(ulps(t.tangent, (1.0 - th * th) * a) <= 4);

        let s = u * u;
        prop_assert!(ulps(s.tangent, 2.0 * uv * a) <= 4);

        let nested = u.tanh().exp();
        prop_assert!(ulps(nested.tangent, libm::exp(th) * ((1.0 - th * th) * a)) <= 4);
    }

    #[test]
    fn reverse_matches_forward(w in proptest::collection::vec(-1.0f64..1.0, TANH_WEIGHTS), x0 in -2.0f64..2.0, x1 in -2.0f64..2.0) {
        let p = tanh_program(&w);
        let x = [x0, x1];
        let (_, g) = program_gradient(&p, &x).unwrap();
        for k in 0..2 {
            let (_, t) = forward_with_tangent(&p, &x, k).unwrap();
            prop_assert!((g[k] - t[0]).abs() <= 1e-12 * t[0].abs().max(1e-3), "{} vs {}", g[k], t[0]);
        }
    }

    #[test]
    fn softmax_program_matches_real_path(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0) {
        let mut pb = ProgramBuilder::new(3);
        let ins = [pb.input(0), pb.input(1), pb.input(2)];
        let out = pb.softmax(&ins);
        let p = pb.build(&out);
        let v = p.evaluate(&[a, b, c]).unwrap();
        let s: f64 = v.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-15);
        let e: Vec<f64> = [a, b, c].iter().map(|&x| Real::exp(x)).collect();
        let z: f64 = e.iter().sum();
        for k in 0..3 {
            prop_assert!((v[k] - e[k] / z).abs() < 1e-15);
        }
    }
}
