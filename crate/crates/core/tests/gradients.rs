mod common;

use common::*;
use proptest::prelude::*;
use unmerge_core::backbone::{evaluate, flatten_factor_grads, loss_and_grad, Activation, Grads, Wrt};
use unmerge_core::rng::{self, Purpose};
use unmerge_core::train::{trap2_objective, ScaleDistribution, Trap2Config};

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Relu), Just(Activation::Tanh)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn analytic_gradients_match_central_differences(seed in 1000u64..100_000, act in activation()) {
        let e = gradient_errors(seed, act);
        prop_assert!(e.max() < 1e-4, "{e:?}");
    }

    #[test]
    fn loss_agrees_with_forward_at_any_scale(seed in 0u64..10_000, s in 0.0f64..3.0) {
        let spec = tiny_spec(Activation::Relu);
        let w0 = random_weights(&spec, seed);
        let a = random_adapter(&spec, &[0, 1], 2, seed);
        let data = batch(&spec, 9, seed);
        let (loss, _) = loss_and_grad(&w0, &a, s, &data, Wrt::LoraFactors).unwrap();
        let eval = evaluate(&w0, Some(&a.materialize().unwrap()), s, &data).unwrap();
        prop_assert!((loss - eval.loss).abs() < 1e-12);
    }

    #[test]
    fn trap2_without_penalty_is_the_nominal_gradient(seed in 0u64..10_000, s in 0.05f64..0.95) {
        let spec = tiny_spec(Activation::Tanh);
        let w0 = random_weights(&spec, seed);
        let a = random_adapter(&spec, &[0, 1], 2, seed);
        let data = batch(&spec, 6, seed);
        let cfg = Trap2Config { lambda: 0.0, ..Trap2Config::default() };
        let t = trap2_objective(&w0, &a, &data, s, &cfg).unwrap();
        let Grads::Lora(g) = loss_and_grad(&w0, &a, 1.0, &data, Wrt::LoraFactors).unwrap().1 else { unreachable!() };
        prop_assert_eq!(t.objective, t.nominal_loss);
        prop_assert_eq!(flatten_factor_grads(&t.grad), flatten_factor_grads(&g));
    }
}

/// Composite Simpson rule with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + inner + f(b)) * h / 3.0
}

#[test]
fn sampled_penalty_is_unbiased_for_the_scale_integral() {
    let spec = tiny_spec(Activation::Tanh);
    let w0 = random_weights(&spec, 3);
    let a = random_adapter(&spec, &[0, 1], 2, 3);
    let data = batch(&spec, 12, 3);
    let cfg = Trap2Config { lambda: 1.0, ..Trap2Config::default() };
    let dist = ScaleDistribution::default();
    let u = a.materialize().unwrap();
    let penalty = |s: f64| evaluate(&w0, Some(&u), s, &data).unwrap().loss / s;
    let nominal = evaluate(&w0, Some(&u), 1.0, &data).unwrap().loss;
    let total: f64 = dist.intervals().iter().map(|(lo, hi)| hi - lo).sum();
    let exact: f64 = dist.intervals().iter().map(|&(lo, hi)| simpson(penalty, lo, hi, 200)).sum::<f64>() / total;

    let mut r = rng::stream(9, "unbiased", Purpose::Scales);
    let n = 20_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let s = dist.sample(&mut r);
            nominal - trap2_objective(&w0, &a, &data, s, &cfg).unwrap().objective
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - exact).abs() < 4.0 * se, "mean {mean}, quadrature {exact}, se {se}");
}
