//! Green's functions of lattice operators: direct inversion with measured
//! decay certificates, the Neumann perturbation transfer and level-to-level
//! variation bounds.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::fourier::{norm_inf, FourierIndex, C64};
use crate::homological::{dense_inverse, LatticeMatrix};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GreensError {
    #[error("near-singular operator: condition estimate {condition:.3e} exceeds cap {cap:.3e}")]
    NearSingular { condition: f64, cap: f64 },
    #[error("smallness gate violated: eps {eps:.3e} ≥ {gate:.3e}")]
    GateViolated { eps: f64, gate: f64 },
    #[error("perturbation series does not contract: q = {q:.3e}")]
    NoContraction { q: f64 },
    #[error("hypothesis unmet: {0}")]
    Hypothesis(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Direct,
    Neumann,
    Cl1,
    Cl2,
    TwoScale,
}

/// Bounding box, size and `∞`-diameter of a site set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDescriptor {
    pub lo: Vec<i32>,
    pub hi: Vec<i32>,
    pub sites: usize,
    pub diameter: u32,
}

impl RegionDescriptor {
    pub fn of(sites: &[FourierIndex]) -> Self {
        let d = sites.first().map(|k| k.len()).unwrap_or(0);
        let mut lo = vec![i32::MAX; d];
        let mut hi = vec![i32::MIN; d];
        for k in sites {
            for j in 0..d {
                lo[j] = lo[j].min(k[j]);
                hi[j] = hi[j].max(k[j]);
            }
        }
        let diameter = lo.iter().zip(&hi).map(|(a, b)| (b - a).max(0) as u32).max().unwrap_or(0);
        RegionDescriptor {
            lo,
            hi,
            sites: sites.len(),
            diameter,
        }
    }
}

/// `‖G‖ ≤ norm_bound` and `|G(x,y)| ≤ e^{−alpha|x−y|}` whenever `|x−y|_∞ > threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCertificate {
    pub norm_bound: f64,
    pub alpha: f64,
    pub threshold: f64,
    pub b_exponent: f64,
    pub region: RegionDescriptor,
    pub provenance: Provenance,
    /// Product of the perturbative constants accumulated on the way to this certificate.
    pub compounded_constant: f64,
}

impl DecayCertificate {
    /// `(C, γ)` with `|G(x,y)| ≤ C e^{−γ|x−y|}` for every pair.
    pub fn envelope(&self) -> (f64, f64) {
        let g = self.alpha;
        let c = (self.norm_bound * (g.max(0.0) * self.threshold).exp()).max(1.0);
        (c, g)
    }
}

pub fn site_distance(a: &[i32], b: &[i32]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x - y).unsigned_abs()).max().unwrap_or(0)
}

/// Spectral norm.
pub fn operator_norm(m: &DMatrix<C64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// `max_{blocks} |G|` for each pair of sites.
pub fn site_magnitudes(g: &DMatrix<C64>, block: usize) -> DMatrix<f64> {
    let s = g.nrows() / block;
    let mut out = DMatrix::zeros(s, s);
    for a in 0..s {
        for b in 0..s {
            let mut m: f64 = 0.0;
            for i in 0..block {
                for j in 0..block {
                    m = m.max(g[(a * block + i, b * block + j)].norm());
                }
            }
            out[(a, b)] = m;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectOptions {
    pub threshold: f64,
    pub alpha_cap: f64,
    pub cond_cap: f64,
    pub b_exponent: f64,
}

impl Default for DirectOptions {
    fn default() -> Self {
        DirectOptions {
            threshold: 0.0,
            alpha_cap: 50.0,
            cond_cap: 1e12,
            b_exponent: 0.996,
        }
    }
}

/// Largest `α` (minus a `1e−9` guard, capped) with `|G(x,y)| ≤ e^{−α|x−y|}` beyond `threshold`.
pub fn fit_alpha(mags: &DMatrix<f64>, sites: &[FourierIndex], threshold: f64, cap: f64) -> f64 {
    let mut alpha = cap;
    for a in 0..sites.len() {
        for b in 0..sites.len() {
            let dist = site_distance(&sites[a], &sites[b]) as f64;
            if dist <= threshold {
                continue;
            }
            let v = mags[(a, b)];
            if v > 0.0 {
                alpha = alpha.min(-v.ln() / dist - 1e-9);
            }
        }
    }
    alpha
}

/// Dense inverse with a measured certificate.
pub fn invert_direct(t: &LatticeMatrix, opts: &DirectOptions) -> Result<(DMatrix<C64>, DecayCertificate), GreensError> {
    let m = t.dense();
    let (g, cond) = dense_inverse(&m).ok_or(GreensError::NearSingular {
        condition: f64::INFINITY,
        cap: opts.cond_cap,
    })?;
    if cond > opts.cond_cap {
        return Err(GreensError::NearSingular {
            condition: cond,
            cap: opts.cond_cap,
        });
    }
    let norm = operator_norm(&g);
    let mags = site_magnitudes(&g, t.block());
    let alpha = fit_alpha(&mags, t.sites(), opts.threshold, opts.alpha_cap);
    let cert = DecayCertificate {
        norm_bound: norm * (1.0 + 1e-6),
        alpha,
        threshold: opts.threshold,
        b_exponent: opts.b_exponent,
        region: RegionDescriptor::of(t.sites()),
        provenance: Provenance::Direct,
        compounded_constant: 1.0,
    };
    Ok((g, cert))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offender {
    pub x: FourierIndex,
    pub y: FourierIndex,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub pass: bool,
    pub norm: f64,
    pub worst: Vec<Offender>,
}

/// Checks `‖G‖ ≤ norm_target` and `|G(x,y)| e^{α|x−y|} ≤ 1` beyond `threshold`.
pub fn certify(
    g: &DMatrix<C64>,
    sites: &[FourierIndex],
    block: usize,
    alpha_target: f64,
    threshold: f64,
    norm_target: f64,
) -> CertifyReport {
    let norm = operator_norm(g);
    let mags = site_magnitudes(g, block);
    certify_magnitudes(&mags, norm, sites, alpha_target, threshold, norm_target)
}

pub fn certify_magnitudes(
    mags: &DMatrix<f64>,
    norm: f64,
    sites: &[FourierIndex],
    alpha_target: f64,
    threshold: f64,
    norm_target: f64,
) -> CertifyReport {
    let mut scored = Vec::new();
    let mut decay_ok = true;
    for a in 0..sites.len() {
        for b in 0..sites.len() {
            let dist = site_distance(&sites[a], &sites[b]) as f64;
            if dist <= threshold {
                continue;
            }
            let v = mags[(a, b)] * (alpha_target * dist).exp();
            if v > 1.0 {
                decay_ok = false;
            }
            scored.push((v, a, b));
        }
    }
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let worst = scored
        .into_iter()
        .take(10)
        .map(|(v, a, b)| Offender {
            x: sites[a].clone(),
            y: sites[b].clone(),
            value: v,
        })
        .collect();
    CertifyReport {
        pass: decay_ok && norm <= norm_target,
        norm,
        worst,
    }
}

/// Outcome of checking a certificate against a true inverse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoundnessCheck {
    pub norm_ok: bool,
    pub decay_ok: bool,
    /// `max |G(x,y)| e^{α|x−y|}` beyond the threshold.
    pub worst_ratio: f64,
    pub true_norm: f64,
}

impl SoundnessCheck {
    pub fn sound(&self) -> bool {
        self.norm_ok && self.decay_ok
    }
}

/// Tests a certificate against the true inverse with a `1e−12` relative rounding allowance.
pub fn check_soundness(cert: &DecayCertificate, g: &DMatrix<C64>, sites: &[FourierIndex], block: usize) -> SoundnessCheck {
    let true_norm = operator_norm(g);
    let mags = site_magnitudes(g, block);
    let mut worst: f64 = 0.0;
    for a in 0..sites.len() {
        for b in 0..sites.len() {
            let dist = site_distance(&sites[a], &sites[b]) as f64;
            if dist <= cert.threshold {
                continue;
            }
            worst = worst.max(mags[(a, b)] * (cert.alpha * dist).exp());
        }
    }
    SoundnessCheck {
        norm_ok: true_norm <= cert.norm_bound * (1.0 + 1e-12),
        decay_ok: worst <= 1.0 + 1e-12,
        worst_ratio: worst,
        true_norm,
    }
}

/// Size of a perturbation `|V(x,y)| ≤ eps·e^{−rho|x−y|}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub eps: f64,
    pub rho: f64,
}

/// `max_x Σ_y e^{−r|x−y|}` over the site set (row sum of an exponential kernel).
pub fn kernel_row_sum(sites: &[FourierIndex], r: f64) -> f64 {
    let mut best: f64 = 0.0;
    for x in sites {
        let s: f64 = sites.iter().map(|y| (-r * site_distance(x, y) as f64).exp()).sum();
        best = best.max(s);
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeumannOptions {
    pub theta: f64,
    /// Number of rates scanned in `(0, α∧ρ)`.
    pub rate_steps: usize,
}

impl Default for NeumannOptions {
    fn default() -> Self {
        NeumannOptions {
            theta: 0.997,
            rate_steps: 24,
        }
    }
}

/// `e^{−4ρ𝒩^θ}` with `𝒩` the region diameter.
pub fn neumann_gate(diameter: u32, rho: f64, theta: f64) -> f64 {
    (-4.0 * rho * (diameter.max(1) as f64).powf(theta)).exp()
}

/// Certificate for `T' = T + V` from one for `T`, enforcing the smallness gate.
pub fn neumann_transfer(
    cert: &DecayCertificate,
    sites: &[FourierIndex],
    block: usize,
    delta: Perturbation,
    opts: &NeumannOptions,
) -> Result<DecayCertificate, GreensError> {
    let gate = neumann_gate(cert.region.diameter, delta.rho, opts.theta);
    if delta.eps >= gate {
        return Err(GreensError::GateViolated { eps: delta.eps, gate });
    }
    neumann_transfer_rigorous(cert, sites, block, delta, opts)
}

/// The transfer without the smallness gate: only the contraction of the
/// weighted Neumann series is required.
pub fn neumann_transfer_rigorous(
    cert: &DecayCertificate,
    sites: &[FourierIndex],
    block: usize,
    delta: Perturbation,
    opts: &NeumannOptions,
) -> Result<DecayCertificate, GreensError> {
    let t = cert.threshold.max(1.0);
    let bf = block as f64;
    let ng = cert.norm_bound;
    let v0 = delta.eps * bf * kernel_row_sum(sites, delta.rho);
    let q0 = ng * v0;
    if q0 >= 1.0 {
        return Err(GreensError::NoContraction { q: q0 });
    }
    let norm_bound = ng / (1.0 - q0);
    let (cg, alpha) = cert.envelope();
    let cap = alpha.min(delta.rho);
    // Nominal shape: rate α∧ρ with the factor 2 absorbed over the threshold.
    let nominal_alpha = cap - 2.0 * 2f64.ln() / t;
    let mut best = f64::NEG_INFINITY;
    if delta.eps == 0.0 {
        best = alpha;
    } else if cap > 0.0 {
        for s in 1..=opts.rate_steps {
            let g = cap * s as f64 / (opts.rate_steps + 1) as f64;
            let wg = cg * bf * kernel_row_sum(sites, alpha - g);
            let wv = delta.eps * bf * kernel_row_sum(sites, delta.rho - g);
            let q = wg * wv;
            if q >= 1.0 {
                continue;
            }
            let a = g - (cg / (1.0 - q)).ln() / t;
            best = best.max(a);
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(GreensError::NoContraction { q: q0 });
    }
    let alpha_out = if delta.eps == 0.0 { alpha } else { best.min(nominal_alpha) };
    Ok(DecayCertificate {
        norm_bound,
        alpha: alpha_out,
        threshold: cert.threshold,
        b_exponent: cert.b_exponent,
        region: cert.region.clone(),
        provenance: Provenance::Neumann,
        compounded_constant: cert.compounded_constant / (1.0 - q0),
    })
}

/// `max |(T'−T)(x,y)| e^{ρ|x−y|}` over the common site set, returned with `ρ`.
pub fn variation_delta(t: &LatticeMatrix, t_next: &LatticeMatrix, rho: f64) -> Perturbation {
    assert_eq!(t.sites(), t_next.sites(), "variation needs a common region");
    let b = t.block();
    let mut eps: f64 = 0.0;
    for (sa, ka) in t.sites().iter().enumerate() {
        for (sb, kb) in t.sites().iter().enumerate() {
            let w = (rho * site_distance(ka, kb) as f64).exp();
            for i in 0..b {
                for j in 0..b {
                    let (r, c) = (sa * b + i, sb * b + j);
                    let v = (t_next.entry(r, c) - t.entry(r, c)).norm();
                    if v > 0.0 {
                        eps = eps.max(v * w);
                    }
                }
            }
        }
    }
    Perturbation { eps, rho }
}

/// Radius `max |k|_∞` of a site set.
pub fn region_radius(sites: &[FourierIndex]) -> u32 {
    sites.iter().map(|k| norm_inf(k)).max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::{cube, FourierSeries, ZERO};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symbol(rng: &mut ChaCha8Rng, d: usize, cutoff: usize, eps: f64, rho: f64) -> FourierSeries {
        let mut f = FourierSeries::scalar_zeros(d, cutoff);
        for k in cube(d, cutoff) {
            if k.iter().all(|&v| v == 0) {
                continue;
            }
            let amp = eps * (-rho * norm_inf(&k) as f64).exp() * rng.random_range(0.0..1.0);
            f.set_entry(&k, 0, 0, C64::new(amp, 0.0));
        }
        (&f + &f.conj_function()).scale_re(0.5)
    }

    #[test]
    fn identity_certificate() {
        let mut t = LatticeMatrix::diagonal(1, 3, vec![0.0], vec![1.0]);
        t = t.with_sigma(0.0);
        let (g, cert) = invert_direct(&t, &DirectOptions::default()).unwrap();
        assert!((cert.norm_bound - 1.0).abs() < 1e-5);
        assert_eq!(cert.alpha, 50.0);
        for r in 0..g.nrows() {
            for c in 0..g.ncols() {
                if r != c {
                    assert_eq!(g[(r, c)], ZERO);
                }
            }
        }
        let rep = certify(&g, t.sites(), 1, 3.0, 0.0, 1.5);
        assert!(rep.pass);
    }

    #[test]
    fn diagonal_norm_is_inverse_min_entry() {
        let t = LatticeMatrix::diagonal(1, 4, vec![0.31], vec![0.05]);
        let (_, cert) = invert_direct(&t, &DirectOptions::default()).unwrap();
        let delta = t.min_abs_diag();
        assert!((cert.norm_bound / (1.0 / delta) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn measured_alpha_tracks_symbol_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rho = 1.0;
        let threshold = 3.0;
        for _ in 0..10 {
            let d = 1;
            let omega = vec![rng.random_range(0.3..0.9) * std::f64::consts::SQRT_2];
            let sym = random_symbol(&mut rng, d, 10, (-4.0_f64 * rho * threshold).exp(), rho);
            let base = LatticeMatrix::new(cube(d, 10), omega, vec![rng.random_range(0.1..0.4)], sym);
            if base.min_abs_diag() < 0.02 {
                continue;
            }
            let opts = DirectOptions {
                threshold,
                ..Default::default()
            };
            let (_, cert) = invert_direct(&base, &opts).unwrap();
            assert!(cert.alpha >= rho - 0.1, "alpha {}", cert.alpha);
        }
    }

    #[test]
    fn certify_flags_planted_far_entry() {
        let t = LatticeMatrix::diagonal(1, 4, vec![0.0], vec![1.0]);
        let (mut g, _) = invert_direct(&t, &DirectOptions::default()).unwrap();
        g[(0, 8)] = C64::new(0.5, 0.0);
        let rep = certify(&g, t.sites(), 1, 1.0, 2.0, 10.0);
        assert!(!rep.pass);
        assert_eq!(rep.worst[0].x, vec![-4]);
        assert_eq!(rep.worst[0].y, vec![4]);
    }

    #[test]
    fn neumann_zero_delta_and_gate() {
        let t = LatticeMatrix::diagonal(1, 5, vec![0.618], vec![0.3]);
        let opts = DirectOptions {
            threshold: 4.0,
            alpha_cap: 5.0,
            ..Default::default()
        };
        let (_, cert) = invert_direct(&t, &opts).unwrap();
        let same = neumann_transfer(&cert, t.sites(), 1, Perturbation { eps: 0.0, rho: 1.0 }, &NeumannOptions::default()).unwrap();
        assert_eq!(same.alpha, cert.alpha);
        assert!((same.norm_bound - cert.norm_bound).abs() < 1e-15);
        let big = neumann_transfer(&cert, t.sites(), 1, Perturbation { eps: 1e-3, rho: 1.0 }, &NeumannOptions::default());
        assert!(matches!(big, Err(GreensError::GateViolated { .. })));
    }

    #[test]
    fn neumann_bounds_hold_against_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let nopts = NeumannOptions::default();
        let mut checked = 0;
        for _ in 0..50 {
            let d = 1;
            let n = 5;
            let rho = 1.0;
            let omega = vec![rng.random_range(0.2..1.3)];
            let base = LatticeMatrix::diagonal(d, n, omega.clone(), vec![rng.random_range(0.05..0.5)]);
            if base.min_abs_diag() < 1e-3 {
                continue;
            }
            let opts = DirectOptions {
                threshold: 3.0,
                alpha_cap: 6.0,
                ..Default::default()
            };
            let (_, cert) = invert_direct(&base, &opts).unwrap();
            let gate = neumann_gate(cert.region.diameter, rho, nopts.theta);
            let eps = gate * rng.random_range(0.01..0.9);
            let sym = random_symbol(&mut rng, d, 2 * n, eps, rho);
            let pert = base.with_symbol(sym);
            let delta = variation_delta(&base, &pert, rho);
            let out = neumann_transfer(&cert, base.sites(), 1, delta, &nopts).unwrap();
            let (g2, _) = invert_direct(&pert, &opts).unwrap();
            let chk = check_soundness(&out, &g2, pert.sites(), 1);
            assert!(chk.sound(), "{chk:?} {out:?}");
            assert!(out.norm_bound <= 2.0 * cert.norm_bound);
            checked += 1;
        }
        assert!(checked > 30);
    }

    #[test]
    fn neumann_is_monotone_in_eps() {
        let t = LatticeMatrix::diagonal(1, 4, vec![0.618], vec![0.3]);
        let opts = DirectOptions {
            threshold: 3.0,
            alpha_cap: 5.0,
            ..Default::default()
        };
        let (_, cert) = invert_direct(&t, &opts).unwrap();
        let mut prev: Option<DecayCertificate> = None;
        for e in [1e-22, 1e-24, 1e-26, 1e-30] {
            let c = neumann_transfer(&cert, t.sites(), 1, Perturbation { eps: e, rho: 1.5 }, &NeumannOptions::default()).unwrap();
            if let Some(p) = &prev {
                assert!(c.alpha >= p.alpha - 1e-15);
                assert!(c.norm_bound <= p.norm_bound + 1e-15);
            }
            prev = Some(c);
        }
    }

    #[test]
    fn variation_of_frequency_shift() {
        let t = LatticeMatrix::diagonal(2, 3, vec![1.0, 1.618], vec![1.0]);
        let t2 = LatticeMatrix::diagonal(2, 3, vec![1.0 + 1e-4, 1.618], vec![1.0]);
        let same = variation_delta(&t, &t, 0.5);
        assert_eq!(same.eps, 0.0);
        let p = variation_delta(&t, &t2, 0.5);
        assert!((p.eps - 3.0 * 1e-4).abs() < 1e-12);
    }

    #[test]
    fn sigma_translation_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let sym = random_symbol(&mut rng, 2, 4, 0.05, 1.0);
        let omega = vec![1.0, 1.618_033_988_749_895];
        let base = LatticeMatrix::new(cube(2, 2), omega.clone(), vec![0.37], sym);
        let k0 = vec![3, -2];
        let shifted = base.translate(&k0);
        let sigma = crate::fourier::dot(&k0, &omega);
        let via_sigma = base.with_sigma(sigma);
        let (g1, _) = invert_direct(&shifted, &DirectOptions::default()).unwrap();
        let (g2, _) = invert_direct(&via_sigma, &DirectOptions::default()).unwrap();
        let diff = (&g1 - &g2).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}
