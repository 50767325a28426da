//! Randomized batch checks that compare emitted bounds against direct computation.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{excluded_fraction_mc, ExclusionRule, FrequencyMap};
use crate::fourier::{cube, dot, norm_inf, FourierSeries, C64};
use crate::greens::{
    check_soundness, invert_direct, neumann_gate, neumann_transfer, neumann_transfer_rigorous, site_distance,
    variation_delta, DecayCertificate, DirectOptions, NeumannOptions,
};
use crate::homological::LatticeMatrix;
use crate::multiscale::{
    build_exhaustion, cl1_couple, cl2_couple, direct_window_certs, sigma_scan, two_scale_couple, union_of_windows,
    window_sites, Block, CouplingOptions, ElementaryRegion, RegionShape, ScaleConfig, ScanTargets, SigmaGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingKind {
    Neumann,
    NeumannUngated,
    Cl1,
    Cl2,
    TwoScale,
}

impl CouplingKind {
    pub const ALL: [CouplingKind; 5] = [
        CouplingKind::Neumann,
        CouplingKind::NeumannUngated,
        CouplingKind::Cl1,
        CouplingKind::Cl2,
        CouplingKind::TwoScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CouplingKind::Neumann => "neumann",
            CouplingKind::NeumannUngated => "neumann-ungated",
            CouplingKind::Cl1 => "cl1",
            CouplingKind::Cl2 => "cl2",
            CouplingKind::TwoScale => "two-scale",
        }
    }
}

/// One randomized instance: whether a certificate was issued and, if so,
/// how it compares with the dense inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub index: usize,
    pub kind: CouplingKind,
    pub d: usize,
    pub side: usize,
    pub issued: bool,
    pub sound: bool,
    /// `max |G(x,y)| e^{α|x−y|}` beyond the threshold; `≤ 1` when sound.
    pub worst_ratio: f64,
    /// True norm over the certified bound.
    pub norm_ratio: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub seed: u64,
    pub records: Vec<AuditRecord>,
    pub issued: usize,
    pub violations: usize,
    /// Issued certificates per kind, in [`CouplingKind::ALL`] order.
    pub issued_by_kind: Vec<(CouplingKind, usize)>,
}

fn small_symbol(rng: &mut ChaCha8Rng, d: usize, cutoff: usize, eps: f64, rho: f64) -> FourierSeries {
    let mut f = FourierSeries::scalar_zeros(d, cutoff);
    for k in cube(d, cutoff) {
        if k.iter().all(|&v| v == 0) {
            continue;
        }
        let v = eps * (-rho * norm_inf(&k) as f64).exp() * rng.random_range(-1.0..1.0);
        f.set_entry(&k, 0, 0, C64::new(v, 0.0));
    }
    (&f + &f.conj_function()).scale_re(0.5)
}

fn random_omega(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.random_range(0.5..1.5)).collect()
}

fn judge(
    index: usize,
    kind: CouplingKind,
    t: &LatticeMatrix,
    cert: Result<DecayCertificate, String>,
) -> AuditRecord {
    let d = t.dim();
    let desc = crate::greens::RegionDescriptor::of(t.sites());
    let side = desc.lo.iter().zip(&desc.hi).map(|(a, b)| (b - a + 1) as usize).max().unwrap_or(0);
    let mut rec = AuditRecord {
        index,
        kind,
        d,
        side,
        issued: false,
        sound: true,
        worst_ratio: 0.0,
        norm_ratio: 0.0,
        note: String::new(),
    };
    match cert {
        Err(e) => rec.note = e,
        Ok(c) => match invert_direct(t, &DirectOptions::default()) {
            Err(e) => rec.note = format!("dense inverse unavailable: {e}"),
            Ok((g, _)) => {
                let chk = check_soundness(&c, &g, t.sites(), t.block());
                rec.issued = true;
                rec.sound = chk.sound();
                rec.worst_ratio = chk.worst_ratio;
                rec.norm_ratio = chk.true_norm / c.norm_bound;
            }
        },
    }
    rec
}

fn neumann_instance(index: usize, rng: &mut ChaCha8Rng, d: usize, gated: bool) -> AuditRecord {
    let n = if d == 1 { rng.random_range(4..=10) } else { rng.random_range(2..=5) };
    let rho = 1.0;
    let omega = random_omega(rng, d, 1.0);
    let base = LatticeMatrix::new(
        cube(d, n),
        omega,
        vec![rng.random_range(0.05..0.5)],
        small_symbol(rng, d, 3, 1e-3, rho),
    );
    let kind = if gated { CouplingKind::Neumann } else { CouplingKind::NeumannUngated };
    let opts = DirectOptions {
        threshold: 3.0,
        alpha_cap: 6.0,
        ..Default::default()
    };
    let cert = match invert_direct(&base, &opts) {
        Ok((_, c)) => c,
        Err(e) => return judge(index, kind, &base, Err(format!("base: {e}"))),
    };
    let nopts = NeumannOptions::default();
    let eps = if gated {
        neumann_gate(cert.region.diameter, rho, nopts.theta) * rng.random_range(0.01..0.9)
    } else {
        10f64.powf(rng.random_range(-10.0..-6.0))
    };
    let pert = base.with_symbol(&base.symbol().clone() + &small_symbol(rng, d, 2 * n, eps, rho));
    let delta = variation_delta(&base, &pert, rho);
    let out = if gated {
        neumann_transfer(&cert, base.sites(), 1, delta, &nopts)
    } else {
        neumann_transfer_rigorous(&cert, base.sites(), 1, delta, &nopts)
    };
    judge(index, kind, &pert, out.map_err(|e| e.to_string()))
}

fn cl1_instance(index: usize, rng: &mut ChaCha8Rng, d: usize) -> AuditRecord {
    let (n, width) = if d == 1 {
        (rng.random_range(8..=10), rng.random_range(3..=4))
    } else {
        (rng.random_range(3..=4), rng.random_range(1..=2))
    };
    let t = LatticeMatrix::new(
        cube(d, n),
        random_omega(rng, d, 1.0),
        vec![rng.random_range(0.1..0.4)],
        small_symbol(rng, d, 4, 1e-3, 1.0),
    );
    let cert = direct_window_certs(&t, width, &DirectOptions::default())
        .map_err(|e| e.to_string())
        .and_then(|certs| {
            cl1_couple(&t, &certs, width, &CouplingOptions::default())
                .map(|r| r.certificate)
                .map_err(|e| e.to_string())
        });
    judge(index, CouplingKind::Cl1, &t, cert)
}

fn cl2_region(rng: &mut ChaCha8Rng, d: usize) -> ElementaryRegion {
    if d == 1 {
        let h = rng.random_range(6..=10);
        return ElementaryRegion::from_sites_box(&[-h], &[h]).expect("nonempty box");
    }
    let h = rng.random_range(4..=6);
    if rng.random_bool(0.5) {
        ElementaryRegion::cube(vec![0, 0], h)
    } else {
        let z = vec![rng.random_range(1..h), -rng.random_range(1..h)];
        ElementaryRegion::new(Block::cube(vec![0, 0], h), Some(z), None).expect("proper shift keeps sites")
    }
}

fn cl2_instance(index: usize, rng: &mut ChaCha8Rng, d: usize) -> AuditRecord {
    let region = cl2_region(rng, d);
    let omega = random_omega(rng, d, 0.05);
    let mut t = LatticeMatrix::new(region.sites().to_vec(), omega, vec![1.0], small_symbol(rng, d, 4, 1e-6, 1.0));
    // A quarter of the instances carry one planted near-resonant site.
    if rng.random_bool(0.25) {
        let k = region.sites()[rng.random_range(0..region.len())].clone();
        t.plant_diagonal(&k, 0, 0.05);
    }
    let cfg = ScaleConfig {
        alpha0: 0.3,
        ..Default::default()
    };
    let cert = cl2_couple(&t, &region, &cfg, 2, 6, &CouplingOptions::default())
        .map(|r| r.certificate)
        .map_err(|e| e.to_string());
    judge(index, CouplingKind::Cl2, &t, cert)
}

fn two_scale_instance(index: usize, rng: &mut ChaCha8Rng, d: usize) -> AuditRecord {
    let (n, k, m0) = if d == 1 {
        (rng.random_range(8..=10), 6, 2)
    } else {
        (rng.random_range(4..=5), 3, 1)
    };
    let t = LatticeMatrix::new(
        cube(d, n),
        random_omega(rng, d, 1.0),
        vec![rng.random_range(0.1..0.4)],
        small_symbol(rng, d, 4, 1e-3, 1.0),
    );
    let opts = DirectOptions::default();
    let build = || -> Result<DecayCertificate, String> {
        let (_, cert_k) = invert_direct(&t.restrict(&cube(d, k)), &opts).map_err(|e| format!("center block: {e}"))?;
        let half = (k / 2) as u32;
        let mut certs = BTreeMap::new();
        for s in t.sites().iter().filter(|s| norm_inf(s) > half) {
            let w = window_sites(t.sites(), s, m0);
            let (_, c) = invert_direct(&t.restrict(&w), &opts).map_err(|e| format!("window {s:?}: {e}"))?;
            certs.insert(s.clone(), c);
        }
        two_scale_couple(&t, n, k, m0, &cert_k, &certs, &ScaleConfig::default(), &CouplingOptions::default())
            .map(|r| r.certificate)
            .map_err(|e| e.to_string())
    };
    judge(index, CouplingKind::TwoScale, &t, build())
}

/// `count` instances cycling through the coupling kinds and `d ∈ {1, 2}`;
/// instance `i` draws from its own stream of `seed`.
pub fn soundness_campaign(seed: u64, count: usize) -> CampaignReport {
    let kinds = CouplingKind::ALL.len();
    let records: Vec<AuditRecord> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let kind = CouplingKind::ALL[i % kinds];
            let d = 1 + (i / kinds) % 2;
            match kind {
                CouplingKind::Neumann => neumann_instance(i, &mut rng, d, true),
                CouplingKind::NeumannUngated => neumann_instance(i, &mut rng, d, false),
                CouplingKind::Cl1 => cl1_instance(i, &mut rng, d),
                CouplingKind::Cl2 => cl2_instance(i, &mut rng, d),
                CouplingKind::TwoScale => two_scale_instance(i, &mut rng, d),
            }
        })
        .collect();
    let issued = records.iter().filter(|r| r.issued).count();
    let violations = records.iter().filter(|r| r.issued && !r.sound).count();
    let issued_by_kind = CouplingKind::ALL
        .iter()
        .map(|&k| (k, records.iter().filter(|r| r.kind == k && r.issued).count()))
        .collect();
    CampaignReport {
        seed,
        records,
        issued,
        violations,
        issued_by_kind,
    }
}

/// Bad-set measures of a σ-scan for a diagonal operator, the exact
/// union-of-windows value, and the measure after adding a small Toeplitz symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaComparison {
    pub delta: f64,
    pub exact: f64,
    pub diagonal: f64,
    pub perturbed: f64,
    pub symbol_eps: f64,
    pub spacing: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSetup {
    pub omega: Vec<f64>,
    pub shifts: Vec<f64>,
    /// Sites `[−n, n]^d`.
    pub n: usize,
    pub delta: f64,
    pub grid: SigmaGrid,
    pub symbol_eps: f64,
    pub symbol_rho: f64,
    pub seed: u64,
}

impl SigmaSetup {
    pub fn example() -> Self {
        SigmaSetup {
            omega: vec![0.618_033_988_749_895],
            shifts: vec![0.25],
            n: 6,
            delta: 0.01,
            grid: SigmaGrid {
                lo: -3.0,
                hi: 3.0,
                points_per_unit: 300.0,
                refine: 30,
            },
            symbol_eps: 1e-4,
            symbol_rho: 1.0,
            seed: 0,
        }
    }
}

pub fn sigma_comparison(setup: &SigmaSetup) -> (SigmaComparison, crate::multiscale::ScanReport) {
    let d = setup.omega.len();
    let n_blocks = setup.shifts.len();
    let diag = LatticeMatrix::diagonal(d, setup.n, setup.omega.clone(), setup.shifts.clone());
    let targets = ScanTargets::from_delta(setup.delta);
    let rep = sigma_scan(|s| diag.with_sigma(s), &setup.grid, &targets);
    let centers: Vec<f64> = cube(d, setup.n)
        .iter()
        .flat_map(|k| setup.shifts.iter().map(move |sh| sh + dot(k, &setup.omega)))
        .collect();
    let exact = union_of_windows(&centers, setup.delta, setup.grid.lo, setup.grid.hi);
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut sym = FourierSeries::zeros(d, 2 * setup.n, n_blocks, n_blocks);
    let scalar = small_symbol(&mut rng, d, 2 * setup.n, setup.symbol_eps, setup.symbol_rho);
    for j in 0..n_blocks {
        sym.set_entry_series(j, j, &scalar);
    }
    let pert = diag.with_symbol(sym);
    let prep = sigma_scan(|s| pert.with_sigma(s), &setup.grid, &targets);
    (
        SigmaComparison {
            delta: setup.delta,
            exact,
            diagonal: rep.bad_measure,
            perturbed: prep.bad_measure,
            symbol_eps: setup.symbol_eps,
            spacing: setup.grid.spacing(),
            windows: centers.len(),
        },
        rep,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub eps: f64,
    pub fraction: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    /// Log-log slope of excluded fraction against `ε`.
    pub slope: f64,
    /// Least-squares `C` in `fraction ≈ C·√ε`.
    pub constant: f64,
    /// Largest factor between a measured fraction and `C·√ε`.
    pub max_factor: f64,
}

/// Monte Carlo excluded fraction of the initial exclusion rule for each `ε`.
pub fn exclusion_scaling(
    freq_map: &FrequencyMap,
    big_omega: &[f64],
    lo: &[f64],
    hi: &[f64],
    rule_for: impl Fn(f64) -> ExclusionRule,
    eps: &[f64],
    samples: usize,
    seed: u64,
) -> ScalingReport {
    let points: Vec<ScalingPoint> = eps
        .iter()
        .map(|&e| {
            let rule = rule_for(e);
            let mc = excluded_fraction_mc(lo, hi, samples, seed, |xi| rule.passes(&freq_map.eval(xi), big_omega));
            ScalingPoint {
                eps: e,
                fraction: mc.fraction,
                stderr: mc.stderr,
            }
        })
        .collect();
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.fraction > 0.0)
        .map(|p| (p.eps.ln(), p.fraction.ln()))
        .collect();
    let slope = if logs.len() >= 2 {
        let m = logs.len() as f64;
        let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
        let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
        logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / logs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>()
    } else {
        f64::NAN
    };
    // Geometric-mean fit of C.
    let constant = if logs.is_empty() {
        0.0
    } else {
        (logs.iter().map(|(le, lf)| lf - 0.5 * le).sum::<f64>() / logs.len() as f64).exp()
    };
    let max_factor = points
        .iter()
        .map(|p| {
            let pred = constant * p.eps.sqrt();
            if p.fraction <= 0.0 || pred <= 0.0 {
                f64::INFINITY
            } else {
                (p.fraction / pred).max(pred / p.fraction)
            }
        })
        .fold(1.0, f64::max);
    ScalingReport {
        points,
        slope,
        constant,
        max_factor,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustionAudit {
    pub regions: usize,
    pub l_shaped: usize,
    pub exhaustions: usize,
    pub annulus_pairs_checked: usize,
    pub failures: Vec<String>,
}

fn check_one_exhaustion(region: &ElementaryRegion, m: &[i32], width: usize, pairs: &mut usize) -> Vec<String> {
    let mut fail = Vec::new();
    let ex = match build_exhaustion(region, m, width) {
        Ok(e) => e,
        Err(e) => return vec![format!("build failed at {m:?}: {e}")],
    };
    let w = width as i32;
    let sites = region.sites();
    let total = region.len();
    // S₀ = Q_M(m) ∩ Λ, recomputed by scanning all sites.
    let s0: BTreeSet<usize> = (0..total)
        .filter(|&i| site_distance(&sites[i], m) as i32 <= w)
        .collect();
    if s0.len() == total {
        if ex.depth() != 0 {
            return vec![format!("{m:?}: S₀ = Λ but {} annuli", ex.depth())];
        }
        return fail;
    }
    let mut expected = vec![s0];
    loop {
        let prev = expected.last().unwrap();
        let next: BTreeSet<usize> = (0..total)
            .filter(|&i| prev.iter().any(|&p| site_distance(&sites[i], &sites[p]) as i32 <= 2 * w))
            .collect();
        if next.len() == total || next.len() == prev.len() {
            break;
        }
        expected.push(next);
    }
    if ex.sets.len() != expected.len() {
        fail.push(format!("{m:?}: depth {} vs enumerated {}", ex.sets.len(), expected.len()));
        return fail;
    }
    for (j, (got, want)) in ex.sets.iter().zip(&expected).enumerate() {
        if got.iter().copied().collect::<BTreeSet<_>>() != *want {
            fail.push(format!("{m:?}: S_{j} differs from enumeration"));
        }
    }
    // Annuli partition S_l.
    let mut seen = BTreeSet::new();
    for (j, a) in ex.annuli.iter().enumerate() {
        for &i in a {
            if !seen.insert(i) {
                fail.push(format!("{m:?}: site {i} in two annuli (second A_{j})"));
            }
        }
    }
    let last: BTreeSet<usize> = ex.sets.last().map(|s| s.iter().copied().collect()).unwrap_or_default();
    if seen != last {
        fail.push(format!("{m:?}: annuli do not cover S_l"));
    }
    // Cubes Q_M around sites of nonadjacent annuli are disjoint.
    for i in 0..ex.annuli.len() {
        for j in i + 2..ex.annuli.len() {
            *pairs += 1;
            for &a in &ex.annuli[i] {
                for &b in &ex.annuli[j] {
                    if site_distance(&sites[a], &sites[b]) as i32 <= 2 * w {
                        fail.push(format!("{m:?}: cubes at {:?} (A_{i}) and {:?} (A_{j}) meet", sites[a], sites[b]));
                    }
                }
            }
        }
    }
    fail
}

/// Enumerates exhaustions of random 2-D elementary regions (about half L-shaped)
/// from several centers each and checks them against the definition.
pub fn exhaustion_audit(seed: u64, regions: usize) -> ExhaustionAudit {
    let results: Vec<(bool, usize, usize, Vec<String>)> = (0..regions)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let half = vec![rng.random_range(2..=7), rng.random_range(2..=7)];
            let center = vec![rng.random_range(-3..=3), rng.random_range(-3..=3)];
            let base = Block::new(center, half.clone());
            let shift = if r % 2 == 0 {
                let z: Vec<i32> = half
                    .iter()
                    .map(|&h| {
                        let v = rng.random_range(1..=h);
                        if rng.random_bool(0.5) { v } else { -v }
                    })
                    .collect();
                Some(z)
            } else {
                None
            };
            let region = match ElementaryRegion::new(base, shift, None) {
                Ok(reg) => reg,
                Err(e) => return (false, 0, 0, vec![format!("region {r}: {e}")]),
            };
            let mut pairs = 0;
            let mut fails = Vec::new();
            let mut count = 0;
            for _ in 0..4 {
                let m = region.sites()[rng.random_range(0..region.len())].clone();
                let width = rng.random_range(1..=2);
                fails.extend(check_one_exhaustion(&region, &m, width, &mut pairs));
                count += 1;
            }
            if let Some(c) = region.interior_corner().cloned() {
                fails.extend(check_one_exhaustion(&region, &c, 1, &mut pairs));
                count += 1;
            }
            (region.shape() == RegionShape::LShaped, count, pairs, fails)
        })
        .collect();
    ExhaustionAudit {
        regions,
        l_shaped: results.iter().filter(|r| r.0).count(),
        exhaustions: results.iter().map(|r| r.1).sum(),
        annulus_pairs_checked: results.iter().map(|r| r.2).sum(),
        failures: results.into_iter().flat_map(|r| r.3).collect(),
    }
}
