mod support;

use delo::numerics::gradcheck::relative_error;
use delo::numerics::{Activation, DenseNet};
use delo::rng;
use proptest::prelude::*;

const TOL: f64 = 1e-4;

fn assert_report(seed: u64, report: support::Report) {
    for (name, res) in report {
        assert!(res.checked > 0, "{name}: nothing checked");
        assert!(res.max_rel_err < TOL, "seed {seed}, {name}: relative error {:.3e}", res.max_rel_err);
    }
}

#[test]
fn detector_gradients_match_finite_differences() {
    for seed in 0..4 {
        assert_report(seed, support::detector_checks(seed));
    }
}

#[test]
fn generator_and_head_gradients_match_finite_differences() {
    for seed in 0..4 {
        assert_report(seed, support::generator_checks(seed));
    }
}

#[test]
fn retraining_gradient_matches_finite_differences() {
    for seed in 0..4 {
        assert_report(seed, support::retrain_checks(seed));
    }
}

fn act(i: u8) -> Activation {
    match i % 4 {
        0 => Activation::Relu,
        1 => Activation::Sigmoid,
        2 => Activation::Identity,
        _ => Activation::Softmax,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn input_gradient_matches_finite_differences(
        seed in 0u64..1_000,
        hidden in 1usize..6,
        out in 1usize..4,
        a1 in 0u8..3,
        a2 in 0u8..4,
        x in prop::collection::vec(-2.0f64..2.0, 3),
        w in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let net = DenseNet::new(3, &[(hidden, act(a1)), (out, act(a2))], &mut rng::rng(seed)).unwrap();
        let up: Vec<f64> = (0..out).map(|k| w[k % 3]).collect();
        let f = |x: &[f64]| net.predict(x).unwrap().iter().zip(&up).map(|(y, u)| y * u).sum::<f64>();
        let (_, tape) = net.forward(&x).unwrap();
        let dx = net.input_grad(&tape, &up).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            // Skip coordinates whose stencil straddles a ReLU kink.
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let one_sided = (f(&xp) - f(&x)) / h;
            if relative_error(fd, one_sided) > 1e-3 && a1 == 0 {
                continue;
            }
            prop_assert!(relative_error(dx[i], fd) < TOL, "coord {i}: {} vs {fd}", dx[i]);
        }
    }
}
