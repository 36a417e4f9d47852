use std::f64::consts::TAU;

use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use critheights::escape::{green, heights};
use critheights::heights_space::{chart, classify, stretch, subannuli, DEFAULT_REL_TOL};
use critheights::selftest::random_shift_polynomial;
use critheights::{EscapeBudget, HeightsVector};

fn heights_vector() -> impl Strategy<Value = HeightsVector> {
    (2usize..8).prop_flat_map(|d| {
        prop::collection::vec(0.01f64..4.0, d - 1).prop_map(move |h| HeightsVector::new(d, h).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn moduli_fill_the_fundamental_annulus(h in heights_vector()) {
        let dec = subannuli(&h, DEFAULT_REL_TOL).unwrap();
        let sum: f64 = dec.moduli.iter().sum();
        let expect = (h.d as f64 - 1.0) * h.max() / TAU;
        prop_assert!((sum - expect).abs() <= 1e-12 * expect.max(1.0));
        prop_assert!(dec.moduli.iter().all(|&m| m > 0.0));
    }

    #[test]
    fn chart_inverts_classify(h in heights_vector()) {
        let (label, x) = classify(&h, DEFAULT_REL_TOL).unwrap();
        let back = chart(&label, &x).unwrap();
        let normalized = h.normalized().unwrap();
        for (a, b) in back.heights.iter().zip(&normalized.heights) {
            prop_assert!((a - b).abs() <= 1e-10 * b);
        }
    }

    #[test]
    fn stretching_keeps_the_cell(h in heights_vector(), s in 0.05f64..20.0) {
        let (label, x) = classify(&h, DEFAULT_REL_TOL).unwrap();
        let (label2, x2) = classify(&stretch(&h, s), DEFAULT_REL_TOL).unwrap();
        prop_assert_eq!(label, label2);
        for (a, b) in x.iter().zip(&x2) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn escape_rate_scales_under_iteration(seed in any::<u64>(), d in 2usize..5, re in -3.0f64..3.0, im in -3.0f64..3.0) {
        let budget = EscapeBudget::default();
        let f = random_shift_polynomial(d, &mut ChaCha8Rng::seed_from_u64(seed), 0.0, false);
        let z = Complex64::new(re, im);
        let g = green(&f, z, &budget).unwrap().value;
        let gf = green(&f, f.evaluate(z), &budget).unwrap().value;
        prop_assert!(g >= 0.0);
        prop_assert!((gf - d as f64 * g).abs() <= 1e-9);
    }

    #[test]
    fn critical_heights_match_escape_of_critical_values(seed in any::<u64>()) {
        let budget = EscapeBudget::default();
        let f = random_shift_polynomial(3, &mut ChaCha8Rng::seed_from_u64(seed), 0.05, false);
        let h = heights(&f, &budget).heights;
        let mut from_values: Vec<f64> =
            f.critical_points().iter().map(|c| green(&f, f.evaluate(*c), &budget).unwrap().value / 3.0).collect();
        from_values.sort_by(|a, b| b.total_cmp(a));
        let mut direct = h.heights.clone();
        direct.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in from_values.iter().zip(&direct) {
            prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
        }
    }
}
