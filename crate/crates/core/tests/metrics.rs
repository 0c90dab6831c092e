mod common;

use common::{brute_ap, rng};
use proptest::prelude::*;
use rand::Rng;
use seals_core::metrics::{average_precision, mean_std, pearson};
use seals_core::store::Label;

fn labels(bits: &[bool]) -> Vec<Label> {
    bits.iter().map(|b| Label::from_bool(*b)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap_matches_definition(
        raw in prop::collection::vec((0u8..12, any::<bool>()), 1..200),
    ) {
        // coarse scores force many ties
        let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 4.0).collect();
        let mut pos: Vec<bool> = raw.iter().map(|r| r.1).collect();
        pos[0] = true;
        let got = average_precision(&scores, &labels(&pos)).unwrap();
        prop_assert!((got - brute_ap(&scores, &pos)).abs() < 1e-12);
    }

    #[test]
    fn ap_ignores_monotone_transforms(
        scores in prop::collection::vec(-5.0f64..5.0, 2..100),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let mut pos: Vec<bool> = scores.iter().map(|_| r.gen_bool(0.3)).collect();
        pos[0] = true;
        let l = labels(&pos);
        let base = average_precision(&scores, &l).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 7.0).collect();
        prop_assert!((average_precision(&warped, &l).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_bounded_and_symmetric(
        xy in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50),
    ) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        if let (Ok(a), Ok(b)) = (pearson(&xs, &ys), pearson(&ys, &xs)) {
            prop_assert!(a.abs() <= 1.0 + 1e-12);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn ap_on_200_vectors_matches_brute_force() {
    let mut r = rng(11);
    let scores: Vec<f64> = (0..200).map(|_| r.gen::<f64>()).collect();
    let pos: Vec<bool> = (0..200).map(|_| r.gen_bool(0.1)).collect();
    let got = average_precision(&scores, &labels(&pos)).unwrap();
    assert!((got - brute_ap(&scores, &pos)).abs() < 1e-12);
}

#[test]
fn random_scores_give_prevalence() {
    let n = 2000;
    let mut r = rng(5);
    let pos: Vec<bool> = (0..n).map(|i| i % 20 == 0).collect();
    let l = labels(&pos);
    let aps: Vec<f64> = (0..100)
        .map(|_| {
            let s: Vec<f64> = (0..n).map(|_| r.gen::<f64>()).collect();
            average_precision(&s, &l).unwrap()
        })
        .collect();
    let (mean, _) = mean_std(&aps);
    assert!((mean - 0.05).abs() < 0.01, "mean AP {mean}");
}

#[test]
fn perfect_and_reversed_rankings() {
    let pos = [true, true, false, false, false];
    let s = [5.0, 4.0, 3.0, 2.0, 1.0];
    assert_eq!(average_precision(&s, &labels(&pos)).unwrap(), 1.0);
    let rev: Vec<f64> = s.iter().map(|x| -x).collect();
    let want = (1.0 / 4.0 + 2.0 / 5.0) / 2.0;
    assert!((average_precision(&rev, &labels(&pos)).unwrap() - want).abs() < 1e-15);
}
