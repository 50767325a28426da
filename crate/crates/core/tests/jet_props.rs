//! Poisson bracket, norms and Lie transforms on random jets.

use kam_core::fourier::{cube, FourierSeries, C64};
use kam_core::jet::{HamiltonianJet, Monomial};
use proptest::prelude::*;

const D: usize = 2;
const N: usize = 1;

/// Jet with every monomial of weighted degree `≤ degree` and modes `|k|_∞ ≤ 1`.
fn jet(degree: u32, cutoff: usize) -> impl Strategy<Value = HamiltonianJet> {
    let monos = Monomial::all_up_to(D, N, degree);
    let modes = cube(D, 1);
    let count = monos.len() * modes.len();
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), count).prop_map(move |cs| {
        let mut j = HamiltonianJet::new(D, N, 4, cutoff, (0.5, 0.4));
        for (mi, m) in monos.iter().enumerate() {
            let entries: Vec<(Vec<i32>, C64)> = modes
                .iter()
                .enumerate()
                .map(|(ki, k)| {
                    let (a, b) = cs[mi * modes.len() + ki];
                    (k.clone(), C64::new(a, b))
                })
                .collect();
            j.add_term(m.clone(), &FourierSeries::from_modes(D, &entries));
        }
        j
    })
}

fn bracket(a: &HamiltonianJet, b: &HamiltonianJet) -> HamiltonianJet {
    a.poisson_bracket(b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bracket_is_antisymmetric(f in jet(2, 8), g in jet(2, 8)) {
        let sum = bracket(&f, &g).add(&bracket(&g, &f)).unwrap();
        prop_assert!(sum.terms().all(|(_, c)| c.max_abs() < 1e-12));
    }

    #[test]
    fn bracket_satisfies_jacobi(f in jet(2, 8), g in jet(2, 8), h in jet(2, 8)) {
        let j = bracket(&f, &bracket(&g, &h))
            .add(&bracket(&g, &bracket(&h, &f)))
            .unwrap()
            .add(&bracket(&h, &bracket(&f, &g)))
            .unwrap();
        let worst = j.terms().map(|(_, c)| c.max_abs()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-12, "Jacobi defect {}", worst);
    }

    #[test]
    fn vf_norm_is_subadditive(p in jet(4, 4), q in jet(4, 4), s in 0.1..0.8f64, r in 0.1..0.8f64) {
        let lhs = p.add(&q).unwrap().vf_norm(s, r);
        prop_assert!(lhs <= (p.vf_norm(s, r) + q.vf_norm(s, r)) * (1.0 + 1e-12));
    }

    #[test]
    fn split_obeys_both_triangle_inequalities(p in jet(4, 4)) {
        let sp = p.split_low_high();
        let (s, r) = (0.5, 0.4);
        let (lo, hi, all) = (sp.low.vf_norm(s, r), sp.high.vf_norm(s, r), p.vf_norm(s, r));
        prop_assert!(lo + hi >= all * (1.0 - 1e-12));
        prop_assert!(all >= lo.max(hi) * (1.0 - 1e-12));
        prop_assert_eq!(sp.low.add(&sp.high).unwrap().max_abs_diff(&p), 0.0);
    }

    #[test]
    fn lie_transform_preserves_reality(h in jet(4, 6), f in jet(2, 6), scale in 1e-7..1e-4f64) {
        let h = h.realify();
        let f = f.realify().scale(C64::new(scale, 0.0));
        prop_assert!(h.check_reality(1e-15).0 && f.check_reality(1e-15).0);
        let out = h.lie_transform(&f, 3).unwrap();
        let (ok, v) = out.jet.check_reality(1e-12);
        prop_assert!(ok, "reality defect {}", v);
    }

    #[test]
    fn literal_round_trips(p in jet(4, 4)) {
        let text = p.to_literal();
        let q = HamiltonianJet::parse_literal(&text, D, N, 4, 4, (0.5, 0.4)).unwrap();
        prop_assert_eq!(q.max_abs_diff(&p), 0.0);
    }
}
