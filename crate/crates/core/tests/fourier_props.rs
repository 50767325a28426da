//! Algebraic laws of truncated Fourier series.

use kam_core::fourier::{cube, FourierSeries, C64};
use proptest::prelude::*;

const PHI: f64 = 1.618_033_988_749_895;

fn series(cutoff: usize) -> impl Strategy<Value = FourierSeries> {
    let count = cube(2, cutoff).len();
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), count).prop_map(move |cs| {
        let modes: Vec<(Vec<i32>, C64)> = cube(2, cutoff).into_iter().zip(cs).map(|(k, (a, b))| (k, C64::new(a, b))).collect();
        FourierSeries::from_modes(2, &modes)
    })
}

fn real_series(cutoff: usize) -> impl Strategy<Value = FourierSeries> {
    series(cutoff).prop_map(|f| (&f + &f.conj_function()).scale_re(0.5))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nested_truncation_takes_the_smaller_cutoff(f in series(4), a in 0usize..6, b in 0usize..6) {
        prop_assert_eq!(f.truncate(a).truncate(b).max_abs_diff(&f.truncate(a.min(b))), 0.0);
    }

    #[test]
    fn strip_norm_is_submultiplicative(f in series(3), g in series(3), s in 0.0..1.5f64) {
        let fg = f.product(&g).unwrap();
        prop_assert!(fg.strip_norm(s) <= f.strip_norm(s) * g.strip_norm(s) * (1.0 + 1e-12));
    }

    #[test]
    fn real_series_stay_real(f in real_series(3), g in real_series(3), w in (0.5..2.0f64, 0.5..2.0f64)) {
        prop_assert!(f.reality_violation() < 1e-15);
        prop_assert!((&f + &g).reality_violation() < 1e-15);
        prop_assert!(f.product(&g).unwrap().reality_violation() < 1e-12);
        prop_assert!(f.dir_derivative(&[w.0, w.1]).reality_violation() < 1e-12);
    }

    #[test]
    fn dir_derivative_is_linear_and_commutes_with_truncation(
        f in series(3), g in series(3), c in -2.0..2.0f64, n in 0usize..4
    ) {
        let w = [1.0, PHI];
        let lhs = (&f.scale_re(c) + &g).dir_derivative(&w);
        let rhs = &f.dir_derivative(&w).scale_re(c) + &g.dir_derivative(&w);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        prop_assert!(f.truncate(n).dir_derivative(&w).max_abs_diff(&f.dir_derivative(&w).truncate(n)) == 0.0);
    }

    #[test]
    fn dividing_by_the_divisor_undoes_the_derivative(f in series(4)) {
        let w = [1.0, PHI];
        let df = f.dir_derivative(&w);
        let back = df.map_by_mode(|k| {
            let kw = k[0] as f64 * w[0] + k[1] as f64 * w[1];
            if k.iter().all(|&v| v == 0) { C64::new(0.0, 0.0) } else { C64::new(0.0, -1.0 / kw) }
        });
        let mut centered = f.clone();
        centered.set_entry(&[0, 0], 0, 0, C64::new(0.0, 0.0));
        prop_assert!(back.max_abs_diff(&centered) < 1e-12);
    }

    #[test]
    fn literal_entries_round_trip(f in series(3)) {
        let entries: Vec<(Vec<i64>, f64, f64)> = f
            .modes()
            .map(|(k, c)| (k.iter().map(|&v| i64::from(v)).collect(), c[0].re, c[0].im))
            .collect();
        let g = FourierSeries::from_literal(2, &entries).unwrap();
        prop_assert_eq!(g.max_abs_diff(&f), 0.0);
    }

    #[test]
    fn product_matches_pointwise_evaluation(f in series(2), g in series(2), x in (0.0..6.3f64, 0.0..6.3f64)) {
        let p = f.product(&g).unwrap().eval(&[x.0, x.1])[0];
        let q = f.eval(&[x.0, x.1])[0] * g.eval(&[x.0, x.1])[0];
        prop_assert!((p - q).norm() < 1e-12);
    }
}
