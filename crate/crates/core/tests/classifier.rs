mod common;

use common::{logistic_instance as instance, rng};
use proptest::prelude::*;
use rand::Rng;
use seals_core::classifier::{fit, objective, TrainConfig, TrainingData};

fn data<'a>(v: &'a [f32], t: &[f64], d: usize) -> TrainingData<'a> {
    TrainingData::new(d, v.chunks(d).collect(), t.to_vec())
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences against the analytic gradient on 20 random problems.
#[test]
fn gradient_matches_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let d = 3 + (seed as usize % 6);
        let (v, t) = instance(seed, 30 + seed as usize, d);
        let data = data(&v, &t, d);
        let lambda = [0.0, 1e-4, 0.1, 1.0][seed as usize % 4];
        let mut r = rng(seed + 100);
        let params: Vec<f64> = (0..=d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let (_, grad) = objective(&data, lambda, &params);
        for j in 0..=d {
            let h = 1e-5;
            let mut up = params.clone();
            let mut down = params.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (objective(&data, lambda, &up).0 - objective(&data, lambda, &down).0) / (2.0 * h);
            worst = worst.max(rel_err(grad[j], fd));
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn bias_is_not_regularized() {
    let (v, t) = instance(3, 40, 4);
    let data = data(&v, &t, 4);
    let p = vec![0.0, 0.0, 0.0, 0.0, 2.0];
    let (l0, _) = objective(&data, 0.0, &p);
    let (l1, _) = objective(&data, 10.0, &p);
    assert!((l0 - l1).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn loss_history_never_increases(seed in any::<u64>(), lambda in 1e-5f64..1.0) {
        let (v, t) = instance(seed, 60, 5);
        let m = fit(&data(&v, &t, 5), &TrainConfig { lambda, ..Default::default() }, None).unwrap();
        let h = &m.meta.loss_history;
        prop_assert!(h.windows(2).all(|w| w[1] <= w[0]), "{:?}", h);
        prop_assert!(m.meta.grad_norm <= 1e-6);
    }

    #[test]
    fn different_starts_reach_the_same_optimum(seed in any::<u64>(), lambda in 1e-3f64..1.0) {
        let (v, t) = instance(seed, 50, 4);
        let data = data(&v, &t, 4);
        let cfg = TrainConfig { lambda, ..Default::default() };
        let a = fit(&data, &cfg, None).unwrap();
        let mut r = rng(seed);
        let init: Vec<f64> = (0..5).map(|_| r.gen_range(-3.0..3.0)).collect();
        let b = fit(&data, &cfg, Some(&init)).unwrap();
        for (x, y) in a.weights.iter().chain([&a.bias]).zip(b.weights.iter().chain([&b.bias])) {
            prop_assert!((x - y).abs() < 1e-4, "{} vs {}", x, y);
        }
    }
}

#[test]
fn wrong_init_length_is_rejected() {
    let (v, t) = instance(1, 20, 3);
    assert!(fit(&data(&v, &t, 3), &TrainConfig::default(), Some(&[0.0; 3])).is_err());
}
