//! Paired t-test p-values against a quadrature oracle, and McNemar against
//! hand-computed values.

mod common;

use proptest::prelude::*;
use qdistill::stats::{mcnemar_test, paired_t_test, student_t_two_tailed, Degenerate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn quadrature_oracle_reproduces_known_quantiles() {
    // Two-sided 5% critical values.
    for (df, t) in [(1.0, 12.706204736), (4.0, 2.776445105), (9.0, 2.262157163)] {
        assert!((common::t_two_tailed_by_quadrature(t, df) - 0.05).abs() < 1e-8);
    }
    assert!((common::t_two_tailed_by_quadrature(0.0, 3.0) - 1.0).abs() < 1e-12);
}

#[test]
fn paired_t_test_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..100 {
        let n = rng.random_range(3..=10);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-0.1..0.12)).collect();
        let test = paired_t_test(&b, &a).unwrap();
        let oracle = common::t_two_tailed_by_quadrature(test.t, (n - 1) as f64);
        assert!(
            (test.p - oracle).abs() < 1e-6,
            "n={n} t={} p={} oracle={oracle}",
            test.t,
            test.p
        );
    }
}

#[test]
fn paired_t_test_hand_example() {
    let a = [0.80, 0.82, 0.79, 0.81, 0.80];
    let b = [0.83, 0.84, 0.80, 0.85, 0.82];
    let t = paired_t_test(&b, &a).unwrap();
    // d = [0.03, 0.02, 0.01, 0.04, 0.02], mean 0.024, sd = √(0.00052/4)
    let sd = (0.00052f64 / 4.0).sqrt();
    assert!((t.mean_diff - 0.024).abs() < 1e-12);
    assert!((t.t - 0.024 / (sd / 5f64.sqrt())).abs() < 1e-9);
    assert_eq!(t.df, 4);
}

#[test]
fn degenerate_differences() {
    let a = [0.5, 0.25, 0.75];
    let shifted = [0.625, 0.375, 0.875];
    let t = paired_t_test(&shifted, &a).unwrap();
    assert_eq!(t.degenerate, Some(Degenerate::ConstantShift));
    assert!(t.t.is_infinite() && t.p == 0.0);
    let same = paired_t_test(&a, &a).unwrap();
    assert_eq!(same.degenerate, Some(Degenerate::Identical));
    assert_eq!((same.t, same.p), (0.0, 1.0));
    assert!(paired_t_test(&a, &a[..2]).is_err());
    assert!(paired_t_test(&a[..1], &a[..1]).is_err());
}

#[test]
fn mcnemar_counts_discordant_pairs() {
    let a = [true, true, false, false, true, false, true, true];
    let b = [true, false, true, false, false, false, false, true];
    let m = mcnemar_test(&a, &b).unwrap();
    assert_eq!((m.only_a, m.only_b), (3, 1));
    // (|3 − 1| − 1)² / 4 = 0.25, p = P(χ²₁ > 0.25) = erfc(√0.125)
    assert!((m.chi2 - 0.25).abs() < 1e-15);
    assert!((m.p - 0.617_075_077_451_974_4).abs() < 1e-12);
}

proptest! {
    #[test]
    fn two_tailed_p_is_a_probability_and_monotone(t in 0.0f64..50.0, dt in 0.01f64..5.0, df in 1u32..40) {
        let df = df as f64;
        let p = student_t_two_tailed(t, df);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(student_t_two_tailed(t + dt, df) <= p);
        prop_assert!((student_t_two_tailed(-t, df) - p).abs() < 1e-14);
    }

    #[test]
    fn swapping_arms_flips_t_keeps_p(seed in any::<u64>(), n in 3usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        prop_assert!((ab.t + ba.t).abs() < 1e-9);
        prop_assert!((ab.p - ba.p).abs() < 1e-12);
    }
}
