//! Lattice operators, homological solves, exhaustions and σ-scans on random data.

use kam_core::atlas::{diophantine_ok, pave_and_filter, ParameterAtlas};
use kam_core::fourier::{cube, dot, FourierSeries, C64};
use kam_core::homological::{build_bold_t, build_t, residual_linear, residual_quadratic, solve_hz, solve_hzz, LatticeMatrix};
use kam_core::multiscale::{build_exhaustion, sigma_scan, Block, ElementaryRegion, ScanTargets, SigmaGrid};
use proptest::prelude::*;

const PHI: f64 = 1.618_033_988_749_895;

fn matrix_series(coeffs: &[(f64, f64)], n: usize, cutoff: usize, amp: f64) -> FourierSeries {
    let mut f = FourierSeries::zeros(2, cutoff, n, n);
    let mut it = coeffs.iter().cycle();
    for k in cube(2, cutoff) {
        let decay = (-(k.iter().map(|v| v.unsigned_abs()).sum::<u32>() as f64)).exp();
        for r in 0..n {
            for c in 0..n {
                let (a, b) = it.next().unwrap();
                f.set_entry(&k, r, c, C64::new(*a, *b) * amp * decay);
            }
        }
    }
    f
}

fn hermitian(coeffs: &[(f64, f64)], n: usize, amp: f64) -> FourierSeries {
    let b = matrix_series(coeffs, n, 2, amp);
    (&b + &b.conj_function().transpose()).scale_re(0.5)
}

fn coeffs() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 100)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lattice_operator_is_toeplitz(
        cs in coeffs(),
        k in prop::array::uniform2(-2i32..=2),
        kp in prop::array::uniform2(-2i32..=2),
        p in prop::array::uniform2(-2i32..=2),
    ) {
        let b = hermitian(&cs, 2, 0.1);
        let z = FourierSeries::zeros(2, 0, 2, 2);
        let t = build_t(&[1.0, PHI], &[0.8, 1.9], &b, &z, 4);
        let pos = |k: &[i32]| t.sites().iter().position(|s| s == k).unwrap();
        let shift = |k: &[i32; 2]| [k[0] + p[0], k[1] + p[1]];
        let (a, c) = (pos(&k), pos(&kp));
        let (a2, c2) = (pos(&shift(&k)), pos(&shift(&kp)));
        if a != c {
            for (r, s) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                prop_assert_eq!(t.entry(a * 2 + r, c * 2 + s), t.entry(a2 * 2 + r, c2 * 2 + s));
            }
        }
    }

    #[test]
    fn conjugate_solutions_solve_the_barred_equations(cs in coeffs(), es in coeffs(), n in 4usize..7) {
        let w = [1.0, PHI];
        let big = [0.61, 1.37];
        let q = hermitian(&cs, 2, 0.03);
        let zz = FourierSeries::zeros(2, 0, 2, 2);
        let e = matrix_series(&es, 2, 3, 1.0);
        let e = FourierSeries::from_entries(2, 2, 1, &[e.entry_series(0, 0), e.entry_series(1, 0)]);
        let (f, rep) = solve_hz(&build_t(&w, &big, &q, &zz, n), &e, 1e12).unwrap();
        prop_assert!(rep.residual < 1e-12);
        prop_assert!(residual_linear(&w, &big, &q, &f, &e, n, 1.0) < 1e-10);
        prop_assert!(residual_linear(&w, &big, &q, &f.conj_function(), &e.conj_function(), n, -1.0) < 1e-10);

        let s = matrix_series(&es[7..], 2, 2, 1.0);
        let s = (&s + &s.transpose()).scale_re(0.5);
        let (g, _) = solve_hzz(&build_bold_t(&w, &big, &q, &zz, n - 2), &s, 1e12).unwrap();
        prop_assert!(residual_quadratic(&w, &big, &q, &g, &s, n - 2, 1.0) < 1e-10);
        prop_assert!(residual_quadratic(&w, &big, &q, &g.conj_function(), &s.conj_function(), n - 2, -1.0) < 1e-10);
    }

    #[test]
    fn exhaustion_annuli_partition_the_last_set(
        half in prop::array::uniform2(2i32..7),
        shift in prop::array::uniform2(-5i32..=5),
        pick in 0usize..10_000,
        width in 1usize..3,
    ) {
        let base = Block::new(vec![0, 0], half.to_vec());
        let Ok(region) = ElementaryRegion::new(base, Some(shift.to_vec()), None) else {
            return Ok(());
        };
        let m = region.sites()[pick % region.len()].clone();
        let ex = build_exhaustion(&region, &m, width).unwrap();
        for w in ex.sets.windows(2) {
            prop_assert!(w[0].iter().all(|i| w[1].binary_search(i).is_ok()), "sets not nested");
        }
        let mut union: Vec<usize> = ex.annuli.iter().flatten().copied().collect();
        let total = union.len();
        union.sort_unstable();
        union.dedup();
        prop_assert_eq!(union.len(), total, "annuli overlap");
        prop_assert_eq!(&union, ex.sets.last().unwrap());
        for (site, label) in ex.label.iter().enumerate() {
            match label {
                Some(j) => prop_assert!(ex.annuli[*j].binary_search(&site).is_ok()),
                None => prop_assert!(union.binary_search(&site).is_err()),
            }
        }
    }

    #[test]
    fn looser_targets_never_grow_the_bad_set(norm in 2.0..20.0f64, factor in 1.0..4.0f64, shift in 0.0..1.0f64) {
        let t = LatticeMatrix::diagonal(1, 5, vec![PHI - 1.0], vec![shift]);
        let grid = SigmaGrid { lo: -2.0, hi: 2.0, points_per_unit: 50.0, refine: 0 };
        let tight = sigma_scan(|s| t.with_sigma(s), &grid, &ScanTargets { alpha: f64::NEG_INFINITY, threshold: 0.0, norm });
        let loose = sigma_scan(|s| t.with_sigma(s), &grid, &ScanTargets { alpha: f64::NEG_INFINITY, threshold: 0.0, norm: norm * factor });
        for (a, b) in tight.rows.iter().zip(&loose.rows) {
            prop_assert!(!a.pass || b.pass);
        }
        prop_assert!(loose.bad_measure <= tight.bad_measure + 1e-12);
    }

    #[test]
    fn sigma_translation_matches_region_translation(p in prop::array::uniform2(-3i32..=3), sigma in -1.0..1.0f64) {
        let w = vec![1.0, PHI];
        let t = LatticeMatrix::diagonal(2, 2, w.clone(), vec![0.3]);
        let moved = t.translate(&p);
        let a = t.with_sigma(sigma + dot(&p, &w)).dense();
        let b = moved.with_sigma(sigma).dense();
        prop_assert!((a - b).iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn atlas_rows_round_trip(level in 0u32..4, halves in 2u32..6) {
        let hw = 1.0 / f64::from(2 * halves);
        let a = ParameterAtlas::tile(&[1.0, 1.0], &[2.0, 2.0], hw, level).unwrap();
        let b = ParameterAtlas::parse_rows(&a.rows(), &[1.0, 1.0], &[2.0, 2.0]).unwrap();
        prop_assert_eq!(b.rows(), a.rows());
        prop_assert!(b.check_structure(None).is_empty());
    }

    #[test]
    fn paving_nests_and_stays_disjoint(cut in 1.0..2.0f64, slope in -1.0..1.0f64) {
        let a0 = ParameterAtlas::tile(&[1.0, 1.0], &[2.0, 2.0], 0.125, 0).unwrap();
        let keep = |x: &[f64]| x[0] + slope * (x[1] - 1.5) <= cut;
        let (a1, removed) = pave_and_filter(&a0, 1, 0.0625, keep).unwrap();
        prop_assert!(a1.check_structure(Some(&a0)).is_empty());
        let (a2, _) = pave_and_filter(&a1, 2, 0.03125, keep).unwrap();
        prop_assert!(a2.check_structure(Some(&a1)).is_empty());
        prop_assert!(a2.volume() <= a1.volume() + 1e-12 && a1.volume() <= a0.volume() + 1e-12);
        prop_assert!((a0.volume() - a1.volume() - removed).abs() < 1e-12);
    }

    #[test]
    fn diophantine_margin_survives_small_frequency_moves(
        w in (0.5..2.0f64, 0.5..2.0f64),
        dir in (-1.0..1.0f64, -1.0..1.0f64),
        level in 1i32..4,
    ) {
        let (n, tau, gamma) = (8usize, 4.0, 1e-3);
        let before = gamma * (1.0 + 2f64.powi(-(level - 1)));
        let after = gamma * (1.0 + 2f64.powi(-level));
        let omega = [w.0, w.1];
        prop_assume!(diophantine_ok(&omega, n, before, tau).ok);
        // |⟨k, δ⟩| ≤ |k|₁|δ|_∞ ≤ 2n|δ|_∞ must fit in the margin γ2^{−l}n^{−τ}.
        let room = gamma * 2f64.powi(-level) * (n as f64).powf(-tau) / (2.0 * n as f64);
        let moved = [omega[0] + 0.99 * room * dir.0, omega[1] + 0.99 * room * dir.1];
        prop_assert!(diophantine_ok(&moved, n, after, tau).ok);
    }
}
