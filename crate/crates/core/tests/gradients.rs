mod common;

use proptest::prelude::*;

use common::*;
use uot_core::fields::Trainable;
use uot_core::oracle::{fd_gradient, relative_error, FdSpec};
use uot_core::par;
use uot_core::trainer::evaluate;
use uot_core::{Tape, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn objective_gradient_matches_differences(seed in 0u64..1000, d in 1usize..=2, m1 in 0.5f64..2.0) {
        let cfg = small_config(4, 2, 1, 2);
        let problem = gaussian_problem(d, m1, 1.0);
        let mut fields = random_fields(cfg.field_shape(d), seed, 1.0);
        let pts = points(&problem.rho0, 8, seed + 1);
        let analytic: Vec<f64> = evaluate(&fields, &problem, &cfg, &pts, Trainable::ALL)
            .unwrap()
            .grads
            .iter()
            .flat_map(|g| g.data().to_vec())
            .collect();
        let base = flatten(&fields);
        let fd = fd_gradient(
            |p| {
                unflatten(&mut fields, p);
                evaluate(&fields, &problem, &cfg, &pts, Trainable::NONE).unwrap().terms.total
            },
            &base,
            FdSpec::PARAMS.h,
        );
        let err = relative_error(&analytic, &fd, 1e-8);
        prop_assert!(err < FdSpec::PARAMS.rel_tol, "relative error {err}");
    }

    #[test]
    fn gradient_is_linear_in_the_root(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::matrix(5, 3, (0..15).map(|_| rng.random::<f64>() - 0.5).collect());
        let w = Tensor::matrix(3, 2, (0..6).map(|_| rng.random::<f64>() - 0.5).collect());
        let grad = |ca: f64, cb: f64| {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone()).unwrap();
            let wn = tape.param(w.clone()).unwrap();
            let h = tape.matmul(xn, wn).unwrap();
            let t = tape.tanh(h).unwrap();
            let f = tape.sum_all(t).unwrap();
            let s = tape.square(h).unwrap();
            let g = tape.mean_all(s).unwrap();
            let root = tape.lincomb(&[f, g], &[ca, cb]).unwrap();
            tape.backward(root).unwrap().get(wn).unwrap().clone()
        };
        let (gf, gg, gab) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for k in 0..6 {
            let expect = a * gf.data()[k] + b * gg.data()[k];
            prop_assert!((gab.data()[k] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }
}

#[test]
fn evaluation_is_deterministic_across_paths() {
    let cfg = small_config(10, 5, 2, 10);
    let problem = gaussian_problem(3, 2.0, 2.0);
    let fields = random_fields(cfg.field_shape(3), 7, 1.0);
    let pts = points(&problem.rho0, 4096, 3);
    let run = || evaluate(&fields, &problem, &cfg, &pts, Trainable::ALL).unwrap();
    let a = run();
    par::set_parallel(false);
    let b = run();
    par::set_parallel(true);
    let c = run();
    for e in [&b, &c] {
        assert_eq!(a.terms.total.to_bits(), e.terms.total.to_bits());
        for (x, y) in a.grads.iter().zip(&e.grads) {
            assert_eq!(x, y);
        }
    }
}

#[test]
fn velocity_only_gradients_are_a_prefix() {
    let cfg = small_config(4, 2, 1, 3);
    let problem = gaussian_problem(2, 2.0, 1.0);
    let fields = random_fields(cfg.field_shape(2), 11, 1.0);
    let pts = points(&problem.rho0, 16, 5);
    let all = evaluate(&fields, &problem, &cfg, &pts, Trainable::ALL).unwrap();
    let vel = evaluate(&fields, &problem, &cfg, &pts, Trainable::VELOCITY_ONLY).unwrap();
    assert_eq!(vel.grads.len(), fields.velocity_tensor_count());
    assert_eq!(&all.grads[..vel.grads.len()], &vel.grads[..]);
    assert_eq!(all.terms, vel.terms);
}
