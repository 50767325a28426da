//! Multiscale combinatorics and bound propagation: elementary regions,
//! exhaustions and their annuli, the coupling steps that turn small-scale
//! Green's-function certificates into large-scale ones, and the σ-scan.
//!
//! Every coupling step runs the same resolvent-identity engine. With `U(x)`
//! the local region attached to `x`, the weighted sup
//! `v(x) = max_y |G_Λ(x,y)| e^{γ|x−y|}` obeys `v ≤ a + K v` for a
//! nonnegative kernel `K`. A positive `h` with `K h ≤ q h`, `q < 1`, gives
//! `v ≤ h · max(a/h) / (1 − q)`, which is turned into a certificate.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fourier::{norm_inf, FourierIndex};
use crate::greens::{
    certify_magnitudes, fit_alpha, invert_direct, operator_norm, site_distance, site_magnitudes, DecayCertificate,
    DirectOptions, Provenance, RegionDescriptor,
};
use crate::homological::LatticeMatrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MultiscaleError {
    #[error("empty region")]
    Empty,
    #[error("hypothesis unmet: {0}")]
    Hypothesis(String),
    #[error("coupling does not contract: best factor {q:.3e} ≥ {gate:.3e}")]
    Contraction { q: f64, gate: f64 },
    #[error("region is bad at center {center:?}: {count} bad annuli {annuli:?} over budget {budget:.3}")]
    Bad {
        center: FourierIndex,
        annuli: Vec<usize>,
        count: usize,
        budget: f64,
    },
    #[error("invalid scale configuration: {0:?}")]
    Config(Vec<String>),
}

/// Box `center ± half` (componentwise, inclusive).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub center: Vec<i32>,
    pub half: Vec<i32>,
}

impl Block {
    pub fn new(center: Vec<i32>, half: Vec<i32>) -> Self {
        assert_eq!(center.len(), half.len());
        Block { center, half }
    }

    pub fn cube(center: Vec<i32>, half: i32) -> Self {
        let d = center.len();
        Block::new(center, vec![half; d])
    }

    pub fn lo(&self) -> Vec<i32> {
        self.center.iter().zip(&self.half).map(|(c, h)| c - h).collect()
    }

    pub fn hi(&self) -> Vec<i32> {
        self.center.iter().zip(&self.half).map(|(c, h)| c + h).collect()
    }

    pub fn contains(&self, k: &[i32]) -> bool {
        k.iter()
            .zip(self.center.iter().zip(&self.half))
            .all(|(x, (c, h))| (x - c).abs() <= *h)
    }

    pub fn shifted(&self, z: &[i32]) -> Self {
        Block::new(self.center.iter().zip(z).map(|(c, s)| c + s).collect(), self.half.clone())
    }

    /// Sites in lexicographic order.
    pub fn sites(&self) -> Vec<FourierIndex> {
        let lo = self.lo();
        let hi = self.hi();
        let d = lo.len();
        if lo.iter().zip(&hi).any(|(a, b)| a > b) {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut cur = lo.clone();
        loop {
            out.push(cur.clone());
            let mut axis = d;
            loop {
                if axis == 0 {
                    return out;
                }
                axis -= 1;
                if cur[axis] < hi[axis] {
                    cur[axis] += 1;
                    cur[axis + 1..d].copy_from_slice(&lo[axis + 1..d]);
                    break;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionShape {
    Rectangle,
    LShaped,
    LowerDimensional,
}

/// `R \ (R + z)`, optionally clipped by an ambient box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementaryRegion {
    base: Block,
    shift: Option<Vec<i32>>,
    ambient: Option<Block>,
    sites: Vec<FourierIndex>,
    #[serde(skip)]
    lookup: HashMap<FourierIndex, usize>,
    shape: RegionShape,
    interior_corner: Option<FourierIndex>,
    diameter: u32,
}

impl ElementaryRegion {
    pub fn new(base: Block, shift: Option<Vec<i32>>, ambient: Option<Block>) -> Result<Self, MultiscaleError> {
        let removed = shift.as_ref().map(|z| base.shifted(z));
        let sites: Vec<FourierIndex> = base
            .sites()
            .into_iter()
            .filter(|k| removed.as_ref().is_none_or(|r| !r.contains(k)))
            .filter(|k| ambient.as_ref().is_none_or(|a| a.contains(k)))
            .collect();
        if sites.is_empty() {
            return Err(MultiscaleError::Empty);
        }
        let desc = RegionDescriptor::of(&sites);
        let box_count: usize = desc.lo.iter().zip(&desc.hi).map(|(a, b)| (b - a + 1) as usize).product();
        let d = base.center.len();
        let shape = if box_count == sites.len() {
            if d > 1 && desc.lo.iter().zip(&desc.hi).any(|(a, b)| a == b) {
                RegionShape::LowerDimensional
            } else {
                RegionShape::Rectangle
            }
        } else {
            RegionShape::LShaped
        };
        let lookup: HashMap<FourierIndex, usize> = sites.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
        let interior_corner = match (&shift, shape) {
            (Some(z), RegionShape::LShaped) if z.iter().all(|&v| v != 0) => {
                let lo = base.lo();
                let hi = base.hi();
                let c: FourierIndex = (0..d)
                    .map(|i| if z[i] > 0 { lo[i] + z[i] - 1 } else { hi[i] + z[i] + 1 })
                    .collect();
                lookup.contains_key(&c).then_some(c)
            }
            _ => None,
        };
        Ok(ElementaryRegion {
            base,
            shift,
            ambient,
            sites,
            lookup,
            shape,
            interior_corner,
            diameter: desc.diameter,
        })
    }

    pub fn cube(center: Vec<i32>, half: i32) -> Self {
        Self::new(Block::cube(center, half), None, None).expect("nonempty cube")
    }

    /// The box `[lo, hi]`, written as `R ∩ ambient` with `R = hi ± (hi − lo)`
    /// and ambient `lo ± (hi − lo)` so that even side lengths are allowed.
    pub fn from_sites_box(lo: &[i32], hi: &[i32]) -> Result<Self, MultiscaleError> {
        let span: Vec<i32> = lo.iter().zip(hi).map(|(a, b)| b - a).collect();
        if span.iter().any(|&w| w < 0) {
            return Err(MultiscaleError::Empty);
        }
        Self::new(Block::new(hi.to_vec(), span.clone()), None, Some(Block::new(lo.to_vec(), span)))
    }

    pub fn sites(&self) -> &[FourierIndex] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn index_of(&self, k: &[i32]) -> Option<usize> {
        self.lookup.get(k).copied()
    }

    pub fn contains(&self, k: &[i32]) -> bool {
        self.lookup.contains_key(k)
    }

    pub fn shape(&self) -> RegionShape {
        self.shape
    }

    pub fn interior_corner(&self) -> Option<&FourierIndex> {
        self.interior_corner.as_ref()
    }

    pub fn diameter(&self) -> u32 {
        self.diameter
    }

    pub fn dim(&self) -> usize {
        self.base.center.len()
    }

    pub fn base(&self) -> &Block {
        &self.base
    }

    pub fn shift(&self) -> Option<&[i32]> {
        self.shift.as_deref()
    }

    /// Indices of `Q_w(n) ∩ Λ`.
    pub fn cube_indices(&self, n: &[i32], w: i32) -> Vec<usize> {
        let mut out: Vec<usize> = Block::cube(n.to_vec(), w)
            .sites()
            .iter()
            .filter_map(|k| self.index_of(k))
            .collect();
        out.sort_unstable();
        out
    }
}

/// Nested sets `S₀ ⊂ … ⊂ S_l` around a center and the annuli between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exhaustion {
    pub center: FourierIndex,
    pub width: usize,
    /// Site indices of `S_j` (sorted).
    pub sets: Vec<Vec<usize>>,
    /// Site indices of `A_j = S_j \ S_{j−1}` (sorted).
    pub annuli: Vec<Vec<usize>>,
    /// Annulus holding the interior corner of an L-shaped region.
    pub exceptional: Option<usize>,
    /// Annulus label per site of the region; `None` outside `S_l`.
    pub label: Vec<Option<usize>>,
}

impl Exhaustion {
    pub fn depth(&self) -> usize {
        self.annuli.len()
    }
}

pub fn build_exhaustion(region: &ElementaryRegion, m: &[i32], width: usize) -> Result<Exhaustion, MultiscaleError> {
    if !region.contains(m) {
        return Err(MultiscaleError::Hypothesis(format!("center {m:?} outside the region")));
    }
    if width == 0 {
        return Err(MultiscaleError::Hypothesis("width must be at least 1".into()));
    }
    let w = width as i32;
    let total = region.len();
    let mut label: Vec<Option<usize>> = vec![None; total];
    let mut member = vec![false; total];
    let mut frontier = region.cube_indices(m, w);
    let mut count = frontier.len();
    let mut annuli: Vec<Vec<usize>> = Vec::new();
    let mut sets: Vec<Vec<usize>> = Vec::new();
    if count < total {
        for &i in &frontier {
            member[i] = true;
            label[i] = Some(0);
        }
        annuli.push(frontier.clone());
        sets.push(frontier.clone());
        loop {
            let mut next = Vec::new();
            for &i in &frontier {
                for j in region.cube_indices(&region.sites()[i], 2 * w) {
                    if !member[j] {
                        member[j] = true;
                        next.push(j);
                    }
                }
            }
            count += next.len();
            if count >= total || next.is_empty() {
                // S_{j} would equal Λ: undo and stop.
                for &j in &next {
                    member[j] = false;
                }
                break;
            }
            next.sort_unstable();
            let a = annuli.len();
            for &j in &next {
                label[j] = Some(a);
            }
            let mut s = sets.last().cloned().unwrap_or_default();
            s.extend(next.iter().copied());
            s.sort_unstable();
            sets.push(s);
            annuli.push(next.clone());
            frontier = next;
        }
    }
    let exceptional = region
        .interior_corner()
        .and_then(|c| region.index_of(c))
        .and_then(|i| label[i]);
    Ok(Exhaustion {
        center: m.to_vec(),
        width,
        sets,
        annuli,
        exceptional,
        label,
    })
}

/// Multiscale constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleConfig {
    pub beta: f64,
    pub b: f64,
    pub theta: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub tau: f64,
    pub rho: f64,
    pub alpha0: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig {
            beta: 0.05,
            b: 0.996,
            theta: 0.997,
            lambda: 1.002,
            kappa: 0.005,
            tau: 4.0,
            rho: 1.0,
            alpha0: 0.5,
        }
    }
}

impl ScaleConfig {
    /// Every violated ordering, in a fixed order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let all = [
            ("beta", self.beta),
            ("b", self.b),
            ("theta", self.theta),
            ("lambda", self.lambda),
            ("kappa", self.kappa),
            ("tau", self.tau),
            ("rho", self.rho),
            ("alpha0", self.alpha0),
        ];
        for (name, x) in all {
            if !x.is_finite() {
                v.push(format!("{name} must be finite"));
            }
        }
        if !(0.0 < self.b && self.b < self.theta && self.theta < 1.0) {
            v.push(format!("need 0 < b < theta < 1, got b={} theta={}", self.b, self.theta));
        }
        if !(1.0 < self.lambda && self.lambda < 2.0 - self.theta) {
            v.push(format!("need 1 < lambda < 2 - theta, got lambda={}", self.lambda));
        }
        if !(0.0 < self.kappa && self.kappa < 1e-2) {
            v.push(format!("need 0 < kappa < 0.01, got {}", self.kappa));
        }
        if !(self.beta > 0.0) {
            v.push("beta must be positive".into());
        }
        if !(self.rho > 0.0) {
            v.push("rho must be positive".into());
        }
        if !(self.alpha0 > 0.0) {
            v.push("alpha0 must be positive".into());
        }
        if !(self.tau > 0.0) {
            v.push("tau must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<(), MultiscaleError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(MultiscaleError::Config(v))
        }
    }
}

/// Caches certify outcomes of sub-regions of one operator at fixed targets.
pub struct SubsetCertifier {
    t: LatticeMatrix,
    alpha: f64,
    threshold: f64,
    norm: f64,
    cache: Mutex<HashMap<Vec<FourierIndex>, bool>>,
}

impl SubsetCertifier {
    pub fn new(t: &LatticeMatrix, alpha: f64, threshold: f64, norm: f64) -> Self {
        SubsetCertifier {
            t: t.clone(),
            alpha,
            threshold,
            norm,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn passes(&self, sites: &[FourierIndex]) -> bool {
        if sites.is_empty() {
            return true;
        }
        let key = sites.to_vec();
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return *v;
        }
        let v = evaluate(&self.t.restrict(sites), self.alpha, self.threshold, self.norm).pass;
        self.cache.lock().expect("cache lock").insert(key, v);
        v
    }
}

/// Single evaluation of an operator against targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pass: bool,
    pub norm: f64,
    pub alpha: f64,
}

const ALPHA_CAP: f64 = 50.0;

/// Inverse norm and measured rate, with an exact path for diagonal operators.
pub fn evaluate(t: &LatticeMatrix, alpha: f64, threshold: f64, norm: f64) -> Evaluation {
    if t.symbol().is_zero() {
        let m = t.min_abs_diag();
        let n = if m > 0.0 { 1.0 / m } else { f64::INFINITY };
        return Evaluation {
            pass: n <= norm,
            norm: n,
            alpha: ALPHA_CAP,
        };
    }
    let opts = DirectOptions {
        threshold,
        alpha_cap: ALPHA_CAP,
        cond_cap: 1e14,
        ..Default::default()
    };
    match crate::homological::dense_inverse(&t.dense()) {
        Some((g, cond)) if cond <= opts.cond_cap => {
            let n = operator_norm(&g);
            let mags = site_magnitudes(&g, t.block());
            let a = fit_alpha(&mags, t.sites(), threshold, ALPHA_CAP);
            let rep = certify_magnitudes(&mags, n, t.sites(), alpha, threshold, norm);
            Evaluation {
                pass: rep.pass,
                norm: n,
                alpha: a,
            }
        }
        _ => Evaluation {
            pass: false,
            norm: f64::INFINITY,
            alpha: f64::NEG_INFINITY,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnulusClassification {
    pub good: Vec<bool>,
    pub bad: Vec<usize>,
}

impl AnnulusClassification {
    pub fn bad_count(&self) -> usize {
        self.bad.len()
    }
}

/// An annulus is good iff every `n` in it has `Q_M(n) ∩ A_j` and `Q_M(n) ∩ Λ`
/// passing the certifier; the exceptional annulus is always bad.
pub fn classify_annuli(region: &ElementaryRegion, ex: &Exhaustion, width: usize, certifier: &SubsetCertifier) -> AnnulusClassification {
    let w = width as i32;
    let good: Vec<bool> = ex
        .annuli
        .par_iter()
        .enumerate()
        .map(|(j, annulus)| {
            if ex.exceptional == Some(j) {
                return false;
            }
            annulus.iter().all(|&i| {
                let n = &region.sites()[i];
                let full = region.cube_indices(n, w);
                let inner: Vec<FourierIndex> = full
                    .iter()
                    .filter(|&&s| ex.label[s] == Some(j))
                    .map(|&s| region.sites()[s].clone())
                    .collect();
                let outer: Vec<FourierIndex> = full.iter().map(|&s| region.sites()[s].clone()).collect();
                certifier.passes(&inner) && certifier.passes(&outer)
            })
        })
        .collect();
    let bad = good.iter().enumerate().filter(|(_, g)| !**g).map(|(j, _)| j).collect();
    AnnulusClassification { good, bad }
}

/// Targets used when classifying at scale `M`: rate `alpha`, threshold `M^θ`, norm `e^{M^b}`.
pub fn scale_certifier(t: &LatticeMatrix, width: usize, alpha: f64, cfg: &ScaleConfig) -> SubsetCertifier {
    let m = width as f64;
    SubsetCertifier::new(t, alpha, m.powf(cfg.theta), m.powf(cfg.b).exp())
}

/// Local region with an entry envelope `|G_U(x,y)| ≤ c e^{−alpha|x−y|}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cover {
    pub members: Vec<usize>,
    pub c: f64,
    pub alpha: f64,
}

/// Envelope `(C, α)` fitted to a computed inverse: `C = max(‖G‖, max|G|)` and
/// the largest `α ≤ cap` with `|G(x,y)| ≤ C e^{−α|x−y|}`.
pub fn fit_envelope(mags: &DMatrix<f64>, norm: f64, sites: &[FourierIndex], cap: f64) -> (f64, f64) {
    let c = norm.max(mags.max()) * (1.0 + 1e-9);
    let mut alpha = cap;
    for a in 0..sites.len() {
        for b in 0..sites.len() {
            let d = site_distance(&sites[a], &sites[b]) as f64;
            let v = mags[(a, b)];
            if d > 0.0 && v > 0.0 {
                alpha = alpha.min((c.ln() - v.ln()) / d - 1e-9);
            }
        }
    }
    (c, alpha)
}

fn direct_cover(t: &LatticeMatrix, region_sites: &[FourierIndex], members: Vec<usize>, cap: f64) -> Result<Cover, MultiscaleError> {
    let sites: Vec<FourierIndex> = members.iter().map(|&i| region_sites[i].clone()).collect();
    let sub = t.restrict(&sites);
    let (g, _) = invert_direct(&sub, &DirectOptions { alpha_cap: cap, cond_cap: 1e14, ..Default::default() })
        .map_err(|e| MultiscaleError::Hypothesis(format!("local inverse unavailable: {e}")))?;
    let norm = operator_norm(&g);
    let mags = site_magnitudes(&g, t.block());
    let (c, alpha) = fit_envelope(&mags, norm, &sites, cap);
    Ok(Cover { members, c, alpha })
}

/// Outcome of the coupling engine at its best rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineOutcome {
    pub gamma: f64,
    pub q: f64,
    pub v_max: f64,
    pub alpha: f64,
    pub norm_bound: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingOptions {
    /// Threshold of the emitted certificate.
    pub threshold: f64,
    /// Rates scanned in `[0, ρ]`.
    pub gamma_steps: usize,
    /// Contraction gate.
    pub q_gate: f64,
    /// Off-diagonal decay rate of the operator.
    pub rho: f64,
}

impl Default for CouplingOptions {
    fn default() -> Self {
        CouplingOptions {
            threshold: 4.0,
            gamma_steps: 12,
            q_gate: 0.1,
            rho: 1.0,
        }
    }
}

struct Engine<'a> {
    sites: &'a [FourierIndex],
    assign: Vec<usize>,
    covers: Vec<Cover>,
    block: usize,
    c_s: f64,
    rho: f64,
}

impl Engine<'_> {
    fn run(&self, opts: &CouplingOptions) -> Result<EngineOutcome, MultiscaleError> {
        let n = self.sites.len();
        let dist: Vec<u32> = (0..n * n)
            .into_par_iter()
            .map(|i| site_distance(&self.sites[i / n], &self.sites[i % n]))
            .collect();
        let dmax = dist.iter().copied().max().unwrap_or(0) as usize;
        let neg_rho: Vec<f64> = (0..=dmax).map(|d| (-self.rho * d as f64).exp()).collect();
        let mut in_cover: Vec<Vec<bool>> = Vec::with_capacity(self.covers.len());
        for c in &self.covers {
            let mut f = vec![false; n];
            for &i in &c.members {
                f[i] = true;
            }
            in_cover.push(f);
        }
        let b2 = (self.block * self.block) as f64;
        let mut best: Option<EngineOutcome> = None;
        let mut best_q = f64::INFINITY;
        for step in 0..=opts.gamma_steps {
            let gamma = self.rho * step as f64 / opts.gamma_steps.max(1) as f64;
            let pos_gamma: Vec<f64> = (0..=dmax).map(|d| (gamma * d as f64).exp()).collect();
            let rows: Vec<(f64, Vec<f64>)> = (0..n)
                .into_par_iter()
                .map(|x| {
                    let cov = &self.covers[self.assign[x]];
                    let flag = &in_cover[self.assign[x]];
                    let mut a: f64 = 0.0;
                    let gw: Vec<(usize, f64)> = cov
                        .members
                        .iter()
                        .map(|&w| {
                            let d = dist[x * n + w] as f64;
                            a = a.max(cov.c * ((gamma - cov.alpha) * d).exp());
                            (w, cov.c * (-cov.alpha * d).exp())
                        })
                        .collect();
                    let mut row = vec![0.0; n];
                    if self.c_s > 0.0 {
                        for wp in 0..n {
                            if flag[wp] {
                                continue;
                            }
                            let s: f64 = gw.iter().map(|&(w, g)| g * neg_rho[dist[w * n + wp] as usize]).sum();
                            row[wp] = b2 * self.c_s * pos_gamma[dist[x * n + wp] as usize] * s;
                        }
                    }
                    (a, row)
                })
                .collect();
            let a: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let apply = |h: &[f64]| -> Vec<f64> {
                rows.par_iter()
                    .map(|(_, row)| row.iter().zip(h).map(|(k, v)| k * v).sum::<f64>())
                    .collect()
            };
            let mut h = a.clone();
            let mut ok = true;
            for _ in 0..200 {
                let kh = apply(&h);
                let next: Vec<f64> = a.iter().zip(&kh).map(|(x, y)| x + y).collect();
                let change = next
                    .iter()
                    .zip(&h)
                    .map(|(p, q)| (p - q).abs() / p.abs().max(1e-300))
                    .fold(0.0, f64::max);
                h = next;
                if !h.iter().all(|v| v.is_finite() && *v < 1e250) {
                    ok = false;
                    break;
                }
                if change < 1e-13 {
                    break;
                }
            }
            if !ok {
                continue;
            }
            let kh = apply(&h);
            let q = kh.iter().zip(&h).map(|(k, v)| k / v).fold(0.0, f64::max);
            best_q = best_q.min(q);
            if q >= opts.q_gate {
                continue;
            }
            let ratio = a.iter().zip(&h).map(|(x, y)| x / y).fold(0.0, f64::max);
            let scale = ratio / (1.0 - q) * (1.0 + 1e-9);
            let v: Vec<f64> = h.iter().map(|x| x * scale).collect();
            let v_max = v.iter().copied().fold(0.0, f64::max);
            let alpha = gamma - v_max.max(1.0).ln() / opts.threshold.max(1e-300);
            let bf = self.block as f64;
            let row_sum = (0..n)
                .map(|x| bf * v[x] * (0..n).map(|y| 1.0 / pos_gamma[dist[x * n + y] as usize]).sum::<f64>())
                .fold(0.0, f64::max);
            let col_sum = (0..n)
                .map(|y| bf * (0..n).map(|x| v[x] / pos_gamma[dist[x * n + y] as usize]).sum::<f64>())
                .fold(0.0, f64::max);
            let norm_bound = (row_sum * col_sum).sqrt();
            let out = EngineOutcome {
                gamma,
                q,
                v_max,
                alpha,
                norm_bound,
                threshold: opts.threshold,
            };
            let better = match &best {
                None => true,
                Some(b) => out.alpha > b.alpha || (out.alpha == b.alpha && out.norm_bound < b.norm_bound),
            };
            if better {
                best = Some(out);
            }
        }
        best.ok_or(MultiscaleError::Contraction {
            q: best_q,
            gate: opts.q_gate,
        })
    }
}

fn certificate_from(outcome: &EngineOutcome, sites: &[FourierIndex], provenance: Provenance, b_exponent: f64, compounded: f64) -> DecayCertificate {
    DecayCertificate {
        norm_bound: outcome.norm_bound,
        alpha: outcome.alpha,
        threshold: outcome.threshold,
        b_exponent,
        region: RegionDescriptor::of(sites),
        provenance,
        compounded_constant: compounded,
    }
}

/// Result of a coupling step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingResult {
    pub certificate: DecayCertificate,
    pub engine: Option<EngineOutcome>,
    /// Rate the coupling argument predicts at this scale, for comparison with the certified one.
    pub nominal_alpha: f64,
    pub nominal_norm: f64,
}

/// Local certificates `m → (U(m), cert)` coupled into a certificate for `Λ = t.sites()`.
pub fn cl1_couple(
    t: &LatticeMatrix,
    site_certs: &BTreeMap<FourierIndex, (Vec<FourierIndex>, DecayCertificate)>,
    width: usize,
    opts: &CouplingOptions,
) -> Result<CouplingResult, MultiscaleError> {
    let sites = t.sites();
    if sites.is_empty() {
        return Err(MultiscaleError::Empty);
    }
    let index: HashMap<&FourierIndex, usize> = sites.iter().enumerate().map(|(i, k)| (k, i)).collect();
    let mut covers = Vec::with_capacity(sites.len());
    let mut assign = Vec::with_capacity(sites.len());
    let mut all_full = true;
    let mut max_norm: f64 = 0.0;
    let mut min_alpha = f64::INFINITY;
    for m in sites {
        let (u, cert) = site_certs
            .get(m)
            .ok_or_else(|| MultiscaleError::Hypothesis(format!("no certificate for site {m:?}")))?;
        let mut members = Vec::with_capacity(u.len());
        for k in u {
            members.push(
                *index
                    .get(k)
                    .ok_or_else(|| MultiscaleError::Hypothesis(format!("U({m:?}) leaves the region at {k:?}")))?,
            );
        }
        if !u.contains(m) {
            return Err(MultiscaleError::Hypothesis(format!("U({m:?}) does not contain its center")));
        }
        if members.len() < sites.len() {
            all_full = false;
            let inside: std::collections::HashSet<usize> = members.iter().copied().collect();
            let gap = sites
                .iter()
                .enumerate()
                .filter(|(i, _)| !inside.contains(i))
                .map(|(_, k)| site_distance(m, k))
                .min()
                .unwrap_or(u32::MAX);
            if 2 * gap as usize <= width {
                return Err(MultiscaleError::Hypothesis(format!(
                    "dist({m:?}, Λ∖U) = {gap} is not above half the width {width}"
                )));
            }
        }
        max_norm = max_norm.max(cert.norm_bound);
        min_alpha = min_alpha.min(cert.alpha);
        let (c, alpha) = cert.envelope();
        assign.push(covers.len());
        covers.push(Cover { members, c, alpha });
    }
    let d = sites[0].len() as i32;
    let diam = RegionDescriptor::of(sites).diameter.max(2) as f64;
    let nominal_alpha = min_alpha.min(opts.rho) - diam.ln().powi(-50);
    let nominal_norm = 2.0 * diam.powi(d) * max_norm;
    if all_full {
        let first = &site_certs[&sites[0]].1;
        let mut c = first.clone();
        c.provenance = Provenance::Cl1;
        return Ok(CouplingResult {
            certificate: c,
            engine: None,
            nominal_alpha,
            nominal_norm,
        });
    }
    let engine = Engine {
        sites,
        assign,
        covers,
        block: t.block(),
        c_s: t.decay_constant(opts.rho),
        rho: opts.rho,
    };
    let out = engine.run(opts)?;
    let compounded = 1.0 / (1.0 - out.q);
    Ok(CouplingResult {
        certificate: certificate_from(&out, sites, Provenance::Cl1, 0.0, compounded),
        engine: Some(out),
        nominal_alpha,
        nominal_norm,
    })
}

/// Centered windows `k₀ + [−M₀, M₀]^d` intersected with `Λ`.
pub fn window_sites(sites: &[FourierIndex], k0: &[i32], m0: usize) -> Vec<FourierIndex> {
    sites
        .iter()
        .filter(|k| site_distance(k, k0) as usize <= m0)
        .cloned()
        .collect()
}

/// Direct certificates for each site's window, as consumed by [`cl1_couple`].
pub fn direct_window_certs(
    t: &LatticeMatrix,
    width: usize,
    opts: &DirectOptions,
) -> Result<BTreeMap<FourierIndex, (Vec<FourierIndex>, DecayCertificate)>, MultiscaleError> {
    let sites = t.sites().to_vec();
    let out: Result<Vec<_>, MultiscaleError> = sites
        .par_iter()
        .map(|m| {
            let u = window_sites(&sites, m, width);
            let (_, cert) = invert_direct(&t.restrict(&u), opts)
                .map_err(|e| MultiscaleError::Hypothesis(format!("window at {m:?}: {e}")))?;
            Ok((m.clone(), (u, cert)))
        })
        .collect();
    Ok(out?.into_iter().collect())
}

/// Nominal multiplier recursion along one exhaustion: runs of bad annuli cost
/// `3βM₀` per annulus, good runs `3βM₀` once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalRecursion {
    pub center: FourierIndex,
    /// `(first annulus, length, bad)` per maximal run.
    pub runs: Vec<(usize, usize, bool)>,
    pub log_phi: f64,
}

pub fn nominal_recursion(center: &[i32], cls: &AnnulusClassification, beta: f64, m0: usize) -> NominalRecursion {
    let step = 3.0 * beta * m0 as f64;
    let mut runs = Vec::new();
    let mut j = 0;
    let g = &cls.good;
    while j < g.len() {
        let start = j;
        while j < g.len() && g[j] == g[start] {
            j += 1;
        }
        runs.push((start, j - start, !g[start]));
    }
    let log_phi = runs
        .iter()
        .map(|&(_, len, bad)| if bad { step * len as f64 } else { step })
        .sum();
    NominalRecursion {
        center: center.to_vec(),
        runs,
        log_phi,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cl2Result {
    pub certificate: DecayCertificate,
    pub engine: EngineOutcome,
    pub sound_alpha: f64,
    pub nominal_alpha: f64,
    pub budget: f64,
    pub max_bad: usize,
    pub worst: NominalRecursion,
    pub bad_sites: usize,
}

/// Couples scale-`M` information into a certificate on the region at scale
/// `M_t`. The region must be GOOD; sites whose `Q_M(n) ∩ Λ` fails are covered
/// by their bad cluster thickened by `M`, with the norm taken from a direct
/// solve of that cluster.
pub fn cl2_couple(
    t: &LatticeMatrix,
    region: &ElementaryRegion,
    cfg: &ScaleConfig,
    width_prev: usize,
    width_now: usize,
    opts: &CouplingOptions,
) -> Result<Cl2Result, MultiscaleError> {
    cfg.validate()?;
    let lam = t.restrict(region.sites());
    let certifier = scale_certifier(&lam, width_prev, cfg.alpha0, cfg);
    let budget = cfg.kappa * (width_now as f64).powf(cfg.theta) / width_prev as f64;
    let centers: Vec<usize> = (0..region.len()).collect();
    let per_center: Vec<Result<(usize, AnnulusClassification), MultiscaleError>> = centers
        .par_iter()
        .map(|&i| {
            let m = &region.sites()[i];
            let ex = build_exhaustion(region, m, width_prev)?;
            let cls = classify_annuli(region, &ex, width_prev, &certifier);
            if cls.bad_count() as f64 > budget {
                return Err(MultiscaleError::Bad {
                    center: m.clone(),
                    annuli: cls.bad.clone(),
                    count: cls.bad_count(),
                    budget,
                });
            }
            Ok((i, cls))
        })
        .collect();
    // First failing center in site order, independent of scheduling.
    let per_center: Vec<(usize, AnnulusClassification)> = per_center.into_iter().collect::<Result<_, _>>()?;
    let (worst_i, worst_cls) = per_center
        .iter()
        .max_by(|a, b| a.1.bad_count().cmp(&b.1.bad_count()).then(b.0.cmp(&a.0)))
        .expect("nonempty region");
    let worst = nominal_recursion(&region.sites()[*worst_i], worst_cls, cfg.beta, width_prev);
    let max_bad = worst_cls.bad_count();

    // Site covers for the engine.
    let w = width_prev as i32;
    let sites = region.sites();
    let bad_site: Vec<bool> = (0..sites.len())
        .into_par_iter()
        .map(|i| {
            let cube: Vec<FourierIndex> = region.cube_indices(&sites[i], w).iter().map(|&s| sites[s].clone()).collect();
            !certifier.passes(&cube)
        })
        .collect();
    let mut assign = vec![usize::MAX; sites.len()];
    let mut covers: Vec<Cover> = Vec::new();
    // Bad clusters: components under |x−y| ≤ 2M, thickened by M.
    let mut seen = vec![false; sites.len()];
    for start in 0..sites.len() {
        if !bad_site[start] || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut q = vec![start];
        while let Some(i) = q.pop() {
            for j in region.cube_indices(&sites[i], 2 * w) {
                if bad_site[j] && !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                    q.push(j);
                }
            }
        }
        let mut members: Vec<usize> = comp.iter().flat_map(|&i| region.cube_indices(&sites[i], w)).collect();
        members.sort_unstable();
        members.dedup();
        if members.len() * t.block() > 4096 {
            return Err(MultiscaleError::Hypothesis(format!("bad cluster of {} sites too large", members.len())));
        }
        let id = covers.len();
        covers.push(direct_cover(&lam, sites, members, ALPHA_CAP)?);
        for &i in &comp {
            assign[i] = id;
        }
    }
    let good_covers: Result<Vec<(usize, Cover)>, MultiscaleError> = (0..sites.len())
        .into_par_iter()
        .filter(|&i| assign[i] == usize::MAX)
        .map(|i| Ok((i, direct_cover(&lam, sites, region.cube_indices(&sites[i], w), ALPHA_CAP)?)))
        .collect();
    for (i, c) in good_covers? {
        assign[i] = covers.len();
        covers.push(c);
    }
    let engine = Engine {
        sites,
        assign,
        covers,
        block: t.block(),
        c_s: lam.decay_constant(opts.rho),
        rho: opts.rho,
    };
    let out = engine.run(opts)?;
    let nominal_alpha = (1.0 - 15.0 * cfg.kappa) * cfg.alpha0.min(opts.rho);
    let mut cert = certificate_from(&out, sites, Provenance::Cl2, cfg.b, 1.0 / (1.0 - out.q));
    cert.alpha = out.alpha.min(nominal_alpha);
    Ok(Cl2Result {
        certificate: cert,
        engine: out,
        sound_alpha: out.alpha,
        nominal_alpha,
        budget,
        max_bad,
        worst,
        bad_sites: bad_site.iter().filter(|b| **b).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoScaleNominal {
    /// `log φ_{M₀} = 2ρM₀^θ`.
    pub log_phi_m0: f64,
    /// `log(φ_{M₀} e^{−ρM₀})`; negative when a window step contracts.
    pub log_window_gain: f64,
    /// `(α∧ρ) − (log N)^{−8}`.
    pub gamma_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoScaleResult {
    pub certificate: DecayCertificate,
    pub engine: Option<EngineOutcome>,
    pub nominal: TwoScaleNominal,
}

/// Certificate for `G_N` on `[−N,N]^d = t.sites()` from one for `[−K,K]^d`
/// and window certificates `k₀ + [−M₀,M₀]^d` (clipped) for `|k₀| > K/2`.
pub fn two_scale_couple(
    t: &LatticeMatrix,
    n: usize,
    k: usize,
    m0: usize,
    cert_k: &DecayCertificate,
    certs_m0: &BTreeMap<FourierIndex, DecayCertificate>,
    cfg: &ScaleConfig,
    opts: &CouplingOptions,
) -> Result<TwoScaleResult, MultiscaleError> {
    let rate = cert_k.alpha.min(opts.rho);
    let nominal = TwoScaleNominal {
        log_phi_m0: 2.0 * opts.rho * (m0 as f64).powf(cfg.theta),
        log_window_gain: 2.0 * opts.rho * (m0 as f64).powf(cfg.theta) - opts.rho * m0 as f64,
        gamma_target: rate - (n.max(2) as f64).ln().powi(-8),
    };
    if n <= k {
        let mut c = cert_k.clone();
        c.provenance = Provenance::TwoScale;
        return Ok(TwoScaleResult {
            certificate: c,
            engine: None,
            nominal,
        });
    }
    if 2 * m0 >= k {
        return Err(MultiscaleError::Hypothesis(format!("need 2M₀ < K, got M₀={m0} K={k}")));
    }
    let sites = t.sites();
    let half = (k / 2) as u32;
    let center: Vec<usize> = sites
        .iter()
        .enumerate()
        .filter(|(_, s)| norm_inf(s) as usize <= k)
        .map(|(i, _)| i)
        .collect();
    let (cc, ca) = cert_k.envelope();
    let mut covers = vec![Cover {
        members: center,
        c: cc,
        alpha: ca,
    }];
    let mut assign = Vec::with_capacity(sites.len());
    let index: HashMap<&FourierIndex, usize> = sites.iter().enumerate().map(|(i, s)| (s, i)).collect();
    for s in sites {
        if norm_inf(s) <= half {
            assign.push(0);
            continue;
        }
        let cert = certs_m0
            .get(s)
            .ok_or_else(|| MultiscaleError::Hypothesis(format!("missing window certificate at {s:?}")))?;
        let members: Vec<usize> = window_sites(sites, s, m0).iter().map(|w| index[w]).collect();
        let (c, a) = cert.envelope();
        assign.push(covers.len());
        covers.push(Cover { members, c, alpha: a });
    }
    let engine = Engine {
        sites,
        assign,
        covers,
        block: t.block(),
        c_s: t.decay_constant(opts.rho),
        rho: opts.rho,
    };
    let out = engine.run(opts)?;
    Ok(TwoScaleResult {
        certificate: certificate_from(&out, sites, Provenance::TwoScale, cert_k.b_exponent, 1.0 / (1.0 - out.q)),
        engine: Some(out),
        nominal,
    })
}

/// Targets a σ sample must meet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanTargets {
    pub alpha: f64,
    pub threshold: f64,
    pub norm: f64,
}

impl ScanTargets {
    /// Norm target `1/δ` with no decay requirement; `δ = 0` accepts everything.
    pub fn from_delta(delta: f64) -> Self {
        ScanTargets {
            alpha: f64::NEG_INFINITY,
            threshold: 0.0,
            norm: if delta > 0.0 { 1.0 / delta } else { f64::INFINITY },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaGrid {
    pub lo: f64,
    pub hi: f64,
    pub points_per_unit: f64,
    /// Bisection steps at each pass/fail transition.
    pub refine: usize,
}

impl SigmaGrid {
    pub fn new(lo: f64, hi: f64) -> Self {
        SigmaGrid {
            lo,
            hi,
            points_per_unit: 1e4,
            refine: 30,
        }
    }

    pub fn points(&self) -> Vec<f64> {
        let count = (((self.hi - self.lo) * self.points_per_unit).ceil() as usize).max(1);
        (0..=count)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / count as f64)
            .collect()
    }

    pub fn spacing(&self) -> f64 {
        let count = (((self.hi - self.lo) * self.points_per_unit).ceil() as usize).max(1);
        (self.hi - self.lo) / count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub sigma: f64,
    pub pass: bool,
    pub norm: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub rows: Vec<ScanRow>,
    pub intervals: Vec<(f64, f64)>,
    pub bad_measure: f64,
    pub bad_fraction: f64,
    pub range: (f64, f64),
}

impl ScanReport {
    /// Columnar text: σ, pass, measured norm, measured alpha.
    pub fn columns(&self) -> String {
        let mut s = String::from("sigma pass norm alpha\n");
        for r in &self.rows {
            s.push_str(&format!("{:.12e} {} {:.6e} {:.6e}\n", r.sigma, u8::from(r.pass), r.norm, r.alpha));
        }
        s
    }
}

/// Samples `σ ↦ builder(σ)` over the grid, refines each transition by
/// bisection and reports the failing set.
pub fn sigma_scan<F>(builder: F, grid: &SigmaGrid, targets: &ScanTargets) -> ScanReport
where
    F: Fn(f64) -> LatticeMatrix + Sync,
{
    let eval = |s: f64| {
        let e = evaluate(&builder(s), targets.alpha, targets.threshold, targets.norm);
        ScanRow {
            sigma: s,
            pass: e.pass,
            norm: e.norm,
            alpha: e.alpha,
        }
    };
    let rows: Vec<ScanRow> = grid.points().into_par_iter().map(eval).collect();
    let edges: Vec<f64> = rows
        .par_windows(2)
        .map(|w| {
            if w[0].pass == w[1].pass {
                return f64::NAN;
            }
            let (mut a, mut b) = (w[0].sigma, w[1].sigma);
            let left = w[0].pass;
            for _ in 0..grid.refine {
                let mid = 0.5 * (a + b);
                if eval(mid).pass == left {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            0.5 * (a + b)
        })
        .collect();
    let mut intervals = Vec::new();
    let mut open: Option<f64> = if rows.first().is_some_and(|r| !r.pass) { Some(grid.lo) } else { None };
    for (i, e) in edges.iter().enumerate() {
        if e.is_nan() {
            continue;
        }
        if rows[i].pass {
            open = Some(*e);
        } else if let Some(s) = open.take() {
            intervals.push((s, *e));
        }
    }
    if let Some(s) = open {
        intervals.push((s, grid.hi));
    }
    let bad_measure: f64 = intervals.iter().map(|(a, b)| b - a).sum();
    let len = grid.hi - grid.lo;
    ScanReport {
        rows,
        intervals,
        bad_measure,
        bad_fraction: if len > 0.0 { bad_measure / len } else { 0.0 },
        range: (grid.lo, grid.hi),
    }
}

/// Measure of `{σ ∈ [lo, hi] : min_c |σ + c| < δ}`.
pub fn union_of_windows(centers: &[f64], delta: f64, lo: f64, hi: f64) -> f64 {
    let mut iv: Vec<(f64, f64)> = centers
        .iter()
        .map(|c| ((-c - delta).max(lo), (-c + delta).min(hi)))
        .filter(|(a, b)| a < b)
        .collect();
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (a, b) in iv {
        match cur {
            Some((ca, cb)) if a <= cb => cur = Some((ca, cb.max(b))),
            Some((ca, cb)) => {
                total += cb - ca;
                cur = Some((a, b));
            }
            None => cur = Some((a, b)),
        }
    }
    if let Some((a, b)) = cur {
        total += b - a;
    }
    total
}
