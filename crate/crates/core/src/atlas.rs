//! Parameter-space bookkeeping: Diophantine and Melnikov predicates, box
//! pavings nested across levels, and measure estimates.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fourier::{cube, dot, norm_inf, FourierIndex};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AtlasError {
    #[error("paving mismatch: {0}")]
    Paving(String),
    #[error("malformed atlas row {line}: {reason}")]
    Row { line: usize, reason: String },
    #[error("empty atlas")]
    Empty,
}

/// Frequency map `ω_i(ξ) = Σ c ξ^e` given as a polynomial per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyMap {
    pub terms: Vec<Vec<(f64, Vec<u32>)>>,
}

impl FrequencyMap {
    pub fn identity(d: usize) -> Self {
        FrequencyMap {
            terms: (0..d)
                .map(|i| {
                    let mut e = vec![0; d];
                    e[i] = 1;
                    vec![(1.0, e)]
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn eval(&self, xi: &[f64]) -> Vec<f64> {
        self.terms
            .iter()
            .map(|row| {
                row.iter()
                    .map(|(c, e)| c * e.iter().zip(xi).map(|(&p, x)| x.powi(p as i32)).product::<f64>())
                    .sum()
            })
            .collect()
    }

    /// Bound on `max_i Σ_j |∂ω_i/∂ξ_j|` over the box `[lo, hi]`.
    pub fn lipschitz_bound(&self, lo: &[f64], hi: &[f64]) -> f64 {
        let amax: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| a.abs().max(b.abs())).collect();
        self.terms
            .iter()
            .map(|row| {
                let mut s = 0.0;
                for (c, e) in row {
                    for j in 0..e.len() {
                        if e[j] == 0 {
                            continue;
                        }
                        let mut m = c.abs() * e[j] as f64;
                        for (i, &p) in e.iter().enumerate() {
                            let q = if i == j { p - 1 } else { p };
                            m *= amax[i].powi(q as i32);
                        }
                        s += m;
                    }
                }
                s
            })
            .fold(0.0, f64::max)
    }
}

/// `max(|k|_∞, 1)^{−τ}`.
pub fn divisor_weight(k: &[i32], tau: f64) -> f64 {
    (norm_inf(k).max(1) as f64).powf(-tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiophantineCheck {
    pub ok: bool,
    pub worst_k: Option<FourierIndex>,
    /// `min |⟨k,ω⟩| / (γ|k|^{−τ})`.
    pub worst_ratio: f64,
}

/// Exhaustive test of `|⟨k,ω⟩| > γ|k|^{−τ}` for `0 < |k|_∞ ≤ n`.
pub fn diophantine_ok(omega: &[f64], n: usize, gamma: f64, tau: f64) -> DiophantineCheck {
    let mut worst: Option<(f64, FourierIndex)> = None;
    let mut ok = true;
    for k in cube(omega.len(), n) {
        if k.iter().all(|&v| v == 0) {
            continue;
        }
        // k and −k give the same divisor; keep the lexicographically positive one.
        if k.iter().find(|&&v| v != 0).is_some_and(|&v| v < 0) {
            continue;
        }
        let v = dot(&k, omega).abs();
        let floor = gamma * divisor_weight(&k, tau);
        if v <= floor {
            ok = false;
        }
        let r = if floor > 0.0 { v / floor } else if v > 0.0 { f64::INFINITY } else { 0.0 };
        // Ties go to the shortest k.
        if worst
            .as_ref()
            .is_none_or(|(w, wk)| r < *w || (r == *w && norm_inf(&k) < norm_inf(wk)))
        {
            worst = Some((r, k));
        }
    }
    let (worst_ratio, worst_k) = match worst {
        Some((r, k)) => (r, Some(k)),
        None => (f64::INFINITY, None),
    };
    DiophantineCheck { ok, worst_k, worst_ratio }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelnikovCheck {
    pub ok: bool,
    /// Normal indices of the worst divisor (one, or two when doubled).
    pub worst_js: Vec<usize>,
    pub worst_k: Option<FourierIndex>,
    pub worst_ratio: f64,
}

/// `|⟨k,ω⟩ + Ω_j| > γ|k|^{−τ}` for all `|k|_∞ ≤ n` and `j`; with `doubled`,
/// `Ω_{j₁} + Ω_{j₂}` replaces `Ω_j`.
pub fn melnikov1_ok(omega: &[f64], big_omega: &[f64], n: usize, gamma: f64, tau: f64, doubled: bool) -> MelnikovCheck {
    let shifts: Vec<(Vec<usize>, f64)> = if doubled {
        let mut v = Vec::new();
        for a in 0..big_omega.len() {
            for b in a..big_omega.len() {
                v.push((vec![a, b], big_omega[a] + big_omega[b]));
            }
        }
        v
    } else {
        big_omega.iter().enumerate().map(|(j, &o)| (vec![j], o)).collect()
    };
    let mut ok = true;
    let mut worst: Option<(f64, Vec<usize>, FourierIndex)> = None;
    for k in cube(omega.len(), n) {
        let kw = dot(&k, omega);
        let floor = gamma * divisor_weight(&k, tau);
        for (js, s) in &shifts {
            let v = (kw + s).abs();
            if v <= floor {
                ok = false;
            }
            let r = if floor > 0.0 { v / floor } else if v > 0.0 { f64::INFINITY } else { 0.0 };
            if worst
                .as_ref()
                .is_none_or(|(w, _, wk)| r < *w || (r == *w && norm_inf(&k) < norm_inf(wk)))
            {
                worst = Some((r, js.clone(), k.clone()));
            }
        }
    }
    match worst {
        Some((r, js, k)) => MelnikovCheck {
            ok,
            worst_js: js,
            worst_k: Some(k),
            worst_ratio: r,
        },
        None => MelnikovCheck {
            ok,
            worst_js: Vec::new(),
            worst_k: None,
            worst_ratio: f64::INFINITY,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBox {
    pub center: Vec<f64>,
    pub half_width: f64,
    pub level: u32,
    /// Index of the containing box one level up.
    pub parent: Option<usize>,
}

impl ParameterBox {
    pub fn volume(&self) -> f64 {
        (2.0 * self.half_width).powi(self.center.len() as i32)
    }

    pub fn contains(&self, xi: &[f64]) -> bool {
        self.center.iter().zip(xi).all(|(c, x)| (x - c).abs() <= self.half_width)
    }

    /// Center followed by the `2^d` corners, all moved by the same small offset
    /// with rationally independent components and the corners pulled in by 2%.
    ///
    /// Box grids on rational boxes put exact centers and corners on resonance
    /// hyperplanes `⟨k,ω⟩ + m = 0`; the offset keeps samples generic.
    pub fn sample_points(&self) -> Vec<Vec<f64>> {
        const ROOTS: [f64; 8] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0];
        let d = self.center.len();
        let h = self.half_width;
        let shift = |i: usize| {
            let r = ROOTS[i % ROOTS.len()].sqrt();
            (r.fract() - 0.5) * 0.01
        };
        let mut out = vec![(0..d).map(|i| self.center[i] + h * shift(i)).collect()];
        for mask in 0..(1usize << d) {
            out.push(
                (0..d)
                    .map(|i| {
                        let s = if mask >> i & 1 == 1 { 0.98 } else { -0.98 };
                        self.center[i] + h * (s + shift(i))
                    })
                    .collect(),
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterAtlas {
    pub level: u32,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub boxes: Vec<ParameterBox>,
}

const REL_TOL: f64 = 1e-9;

fn counts_for(lo: &[f64], hi: &[f64], half_width: f64) -> Result<Vec<usize>, AtlasError> {
    lo.iter()
        .zip(hi)
        .map(|(a, b)| {
            let ext = b - a;
            let c = (ext / (2.0 * half_width)).round();
            if !(ext > 0.0) || c < 1.0 || ((c * 2.0 * half_width) - ext).abs() > REL_TOL * ext {
                Err(AtlasError::Paving(format!("extent {ext} is not a multiple of box size {}", 2.0 * half_width)))
            } else {
                Ok(c as usize)
            }
        })
        .collect()
}

impl ParameterAtlas {
    /// Full tiling of `[lo, hi]` by boxes of the given half-width.
    pub fn tile(lo: &[f64], hi: &[f64], half_width: f64, level: u32) -> Result<Self, AtlasError> {
        let counts = counts_for(lo, hi, half_width)?;
        let total: usize = counts.iter().product();
        let boxes = (0..total)
            .map(|mut idx| {
                let center = counts
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let j = idx % c;
                        idx /= c;
                        lo[i] + (2 * j + 1) as f64 * half_width
                    })
                    .collect();
                ParameterBox {
                    center,
                    half_width,
                    level,
                    parent: None,
                }
            })
            .collect();
        Ok(ParameterAtlas {
            level,
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            boxes,
        })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.boxes.iter().map(|b| b.volume()).sum()
    }

    pub fn ambient_volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Index of the box containing `ξ`, if any.
    pub fn locate(&self, xi: &[f64]) -> Option<usize> {
        self.boxes.iter().position(|b| b.contains(xi))
    }

    /// Structural violations: overlapping boxes, off-grid centers and, given
    /// the parent atlas, children not inside their recorded parent.
    pub fn check_structure(&self, parent: Option<&ParameterAtlas>) -> Vec<String> {
        let mut v = Vec::new();
        let mut keys: HashMap<Vec<i64>, usize> = HashMap::new();
        for (i, b) in self.boxes.iter().enumerate() {
            let h = b.half_width;
            let mut key = Vec::with_capacity(b.center.len());
            for (c, l) in b.center.iter().zip(&self.lo) {
                let g = (c - l) / (2.0 * h) - 0.5;
                let r = g.round();
                if (g - r).abs() > 1e-6 {
                    v.push(format!("box {i} off the grid"));
                }
                key.push(r as i64);
            }
            if let Some(j) = keys.insert(key, i) {
                v.push(format!("boxes {j} and {i} overlap"));
            }
            if let Some(p) = parent {
                match b.parent.and_then(|pi| p.boxes.get(pi)) {
                    None => v.push(format!("box {i} has no parent")),
                    Some(pb) => {
                        let inside = b
                            .center
                            .iter()
                            .zip(&pb.center)
                            .all(|(c, pc)| (c - pc).abs() + h <= pb.half_width * (1.0 + REL_TOL) + REL_TOL);
                        if !inside {
                            v.push(format!("box {i} not inside its parent"));
                        }
                    }
                }
            }
        }
        if self.boxes.iter().any(|b| (b.half_width - self.boxes[0].half_width).abs() > REL_TOL * b.half_width) {
            v.push("non-uniform half-width".into());
        }
        v
    }

    /// Rows `level c_1 … c_d half_width`.
    pub fn rows(&self) -> String {
        let mut s = String::new();
        for b in &self.boxes {
            s.push_str(&b.level.to_string());
            for c in &b.center {
                s.push_str(&format!(" {c:.17e}"));
            }
            s.push_str(&format!(" {:.17e}\n", b.half_width));
        }
        s
    }

    /// Parses [`rows`](Self::rows) output; all rows must share level and dimension.
    pub fn parse_rows(text: &str, lo: &[f64], hi: &[f64]) -> Result<Self, AtlasError> {
        let d = lo.len();
        let mut boxes = Vec::new();
        let mut level = None;
        for (line, raw) in text.lines().enumerate() {
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split_whitespace().collect();
            let bad = |reason: String| AtlasError::Row { line: line + 1, reason };
            if fields.len() != d + 2 {
                return Err(bad(format!("expected {} fields, got {}", d + 2, fields.len())));
            }
            let l: u32 = fields[0].parse().map_err(|e| bad(format!("level: {e}")))?;
            if *level.get_or_insert(l) != l {
                return Err(bad("mixed levels".into()));
            }
            let nums: Result<Vec<f64>, _> = fields[1..].iter().map(|f| f.parse::<f64>()).collect();
            let nums = nums.map_err(|e| bad(format!("number: {e}")))?;
            if nums.iter().any(|x| !x.is_finite()) {
                return Err(bad("non-finite value".into()));
            }
            let h = nums[d];
            if !(h > 0.0) {
                return Err(bad("half-width must be positive".into()));
            }
            boxes.push(ParameterBox {
                center: nums[..d].to_vec(),
                half_width: h,
                level: l,
                parent: None,
            });
        }
        Ok(ParameterAtlas {
            level: level.unwrap_or(0),
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            boxes,
        })
    }
}

/// Children of half-width `child_half` tiling every box; a child is kept iff
/// the predicate passes at its center and corners. Returns the new atlas and
/// the removed measure (dropped count times child volume).
pub fn pave_and_filter<P>(atlas: &ParameterAtlas, next_level: u32, child_half: f64, predicate: P) -> Result<(ParameterAtlas, f64), AtlasError>
where
    P: Fn(&[f64]) -> bool + Sync,
{
    let Some(first) = atlas.boxes.first() else {
        return Ok((
            ParameterAtlas {
                level: next_level,
                lo: atlas.lo.clone(),
                hi: atlas.hi.clone(),
                boxes: Vec::new(),
            },
            0.0,
        ));
    };
    let ratio = first.half_width / child_half;
    let m = ratio.round();
    if m < 1.0 || (ratio - m).abs() > 1e-6 * ratio {
        return Err(AtlasError::Paving(format!(
            "child half-width {child_half} does not divide {}",
            first.half_width
        )));
    }
    let m = m as usize;
    let d = atlas.dim();
    let per_parent = m.pow(d as u32);
    let results: Vec<(Vec<ParameterBox>, usize)> = atlas
        .boxes
        .par_iter()
        .enumerate()
        .map(|(pi, pb)| {
            let mut kept = Vec::new();
            let mut dropped = 0;
            for mut idx in 0..per_parent {
                let center: Vec<f64> = (0..d)
                    .map(|i| {
                        let j = idx % m;
                        idx /= m;
                        pb.center[i] - pb.half_width + (2 * j + 1) as f64 * child_half
                    })
                    .collect();
                let child = ParameterBox {
                    center,
                    half_width: child_half,
                    level: next_level,
                    parent: Some(pi),
                };
                if child.sample_points().iter().all(|p| predicate(p)) {
                    kept.push(child);
                } else {
                    dropped += 1;
                }
            }
            (kept, dropped)
        })
        .collect();
    let child_volume = (2.0 * child_half).powi(d as i32);
    let mut boxes = Vec::new();
    let mut dropped = 0;
    for (k, dr) in results {
        boxes.extend(k);
        dropped += dr;
    }
    Ok((
        ParameterAtlas {
            level: next_level,
            lo: atlas.lo.clone(),
            hi: atlas.hi.clone(),
            boxes,
        },
        dropped as f64 * child_volume,
    ))
}

/// Surviving volume of `atlas_l` relative to `atlas_0`.
pub fn measure_fraction(atlas_l: &ParameterAtlas, atlas_0: &ParameterAtlas) -> f64 {
    let v0 = atlas_0.volume();
    if v0 == 0.0 {
        0.0
    } else {
        atlas_l.volume() / v0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub fraction: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Fraction of uniform samples in `[lo, hi]` failing the predicate.
pub fn excluded_fraction_mc<P>(lo: &[f64], hi: &[f64], samples: usize, seed: u64, predicate: P) -> MonteCarloEstimate
where
    P: Fn(&[f64]) -> bool + Sync,
{
    const CHUNK: usize = 4096;
    let chunks = samples.div_ceil(CHUNK);
    let fails: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = CHUNK.min(samples - c * CHUNK);
            let mut f = 0;
            let mut xi = vec![0.0; lo.len()];
            for _ in 0..count {
                for i in 0..lo.len() {
                    xi[i] = rng.random_range(lo[i]..hi[i]);
                }
                if !predicate(&xi) {
                    f += 1;
                }
            }
            f
        })
        .sum();
    let p = fails as f64 / samples.max(1) as f64;
    MonteCarloEstimate {
        fraction: p,
        stderr: (p * (1.0 - p) / samples.max(1) as f64).sqrt(),
        samples,
    }
}

/// Uniform point in a uniformly chosen box of the atlas.
pub fn random_point(atlas: &ParameterAtlas, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    if atlas.boxes.is_empty() {
        return None;
    }
    let b = &atlas.boxes[rng.random_range(0..atlas.boxes.len())];
    Some(
        b.center
            .iter()
            .map(|c| c + b.half_width * rng.random_range(-1.0..1.0))
            .collect(),
    )
}

/// Thresholds used by the initial exclusion: Diophantine at
/// `√ε(1 + 2^{−(l*−1)})`, both Melnikov sets at `√ε`, all up to `|k| ≤ n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExclusionRule {
    pub n: usize,
    pub tau: f64,
    pub gamma_dioph: f64,
    pub gamma_mel: f64,
}

impl ExclusionRule {
    pub fn initial(eps: f64, l_star: u32, n: usize, tau: f64) -> Self {
        let s = eps.sqrt();
        ExclusionRule {
            n,
            tau,
            gamma_dioph: s * (1.0 + 2f64.powi(-(l_star as i32 - 1))),
            gamma_mel: s,
        }
    }

    /// Same verdict as the three diagnostic checks, without allocation and
    /// stopping at the first violated divisor. This is the Monte Carlo hot path.
    pub fn passes(&self, omega: &[f64], big_omega: &[f64]) -> bool {
        let d = omega.len();
        let n = self.n as i32;
        let mut k = vec![-n; d];
        loop {
            let norm = k.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
            let kw: f64 = k.iter().zip(omega).map(|(&a, &w)| a as f64 * w).sum();
            let weight = (norm.max(1) as f64).powf(-self.tau);
            if norm > 0 && kw.abs() <= self.gamma_dioph * weight {
                return false;
            }
            let floor = self.gamma_mel * weight;
            for (a, &oa) in big_omega.iter().enumerate() {
                if (kw + oa).abs() <= floor {
                    return false;
                }
                for &ob in &big_omega[a..] {
                    if (kw + oa + ob).abs() <= floor {
                        return false;
                    }
                }
            }
            // Odometer over [−n, n]^d.
            let mut i = 0;
            while i < d {
                if k[i] < n {
                    k[i] += 1;
                    break;
                }
                k[i] = -n;
                i += 1;
            }
            if i == d {
                return true;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PHI: f64 = 1.618_033_988_749_895;

    #[test]
    fn fast_rule_agrees_with_diagnostics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let big = [0.9, 1.45];
        for rule in [ExclusionRule::initial(1e-2, 1, 6, 4.0), ExclusionRule::initial(1e-4, 2, 10, 3.0)] {
            let mut rejected = 0;
            for _ in 0..3000 {
                let omega = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
                let slow = diophantine_ok(&omega, rule.n, rule.gamma_dioph, rule.tau).ok
                    && melnikov1_ok(&omega, &big, rule.n, rule.gamma_mel, rule.tau, false).ok
                    && melnikov1_ok(&omega, &big, rule.n, rule.gamma_mel, rule.tau, true).ok;
                assert_eq!(rule.passes(&omega, &big), slow, "{omega:?}");
                rejected += usize::from(!slow);
            }
            assert!(rejected > 30, "too few rejections ({rejected}) to exercise the rule");
        }
    }

    #[test]
    fn diophantine_examples() {
        let r = diophantine_ok(&[1.0, 1.0], 5, 1e-3, 3.0);
        assert!(!r.ok);
        assert_eq!(r.worst_k, Some(vec![1, -1]));
        assert!(diophantine_ok(&[1.0, PHI], 20, 0.05, 3.0).ok);
        let h = diophantine_ok(&[1.0, 0.5], 5, 1e-3, 3.0);
        assert!(!h.ok);
        assert_eq!(h.worst_k, Some(vec![1, -2]));
    }

    #[test]
    fn melnikov_examples() {
        let r = melnikov1_ok(&[1.0, PHI], &[1.0], 0, 0.5, 3.0, false);
        assert!(r.ok);
        assert!((r.worst_ratio - 2.0).abs() < 1e-12);
        let k0 = [-2, 1];
        let om = [2.0 - PHI];
        let planted = melnikov1_ok(&[1.0, PHI], &om, 4, 1e-6, 3.0, false);
        assert!(!planted.ok);
        assert_eq!(planted.worst_k, Some(k0.to_vec()));
        let a = melnikov1_ok(&[1.0, PHI], &[0.37], 6, 0.01, 3.0, true);
        let b = melnikov1_ok(&[1.0, PHI], &[0.74], 6, 0.01, 3.0, false);
        assert_eq!(a.ok, b.ok);
        assert_eq!(a.worst_k, b.worst_k);
        assert!((a.worst_ratio - b.worst_ratio).abs() < 1e-12);
    }

    #[test]
    fn pave_true_and_fraction() {
        let a0 = ParameterAtlas::tile(&[1.0, 1.0], &[2.0, 2.0], 0.125, 0).unwrap();
        assert_eq!(a0.boxes.len(), 16);
        let (a1, removed) = pave_and_filter(&a0, 1, 0.0625, |_| true).unwrap();
        assert_eq!(a1.boxes.len(), 64);
        assert_eq!(removed, 0.0);
        assert!(a1.check_structure(Some(&a0)).is_empty());
        assert_eq!(measure_fraction(&a1, &a0), 1.0);
        let (half, _) = pave_and_filter(&a0, 1, 0.0625, |x| x[0] <= 1.5).unwrap();
        assert!((measure_fraction(&half, &a0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn slab_volume_within_twenty_percent() {
        let a0 = ParameterAtlas::tile(&[1.0, 1.0], &[2.0, 2.0], 1.0 / 16.0, 0).unwrap();
        let delta = 0.1;
        let (_, removed) = pave_and_filter(&a0, 1, 1.0 / 512.0, |x| (x[0] - x[1]).abs() >= delta).unwrap();
        let exact = 1.0 - (1.0 - delta) * (1.0 - delta);
        assert!((removed / exact - 1.0).abs() < 0.2, "{removed} vs {exact}");
    }

    #[test]
    fn rows_round_trip_and_rejects() {
        let a0 = ParameterAtlas::tile(&[0.0], &[1.0], 0.25, 3).unwrap();
        let back = ParameterAtlas::parse_rows(&a0.rows(), &[0.0], &[1.0]).unwrap();
        assert_eq!(back.boxes.len(), 2);
        assert_eq!(back.boxes[1].center, a0.boxes[1].center);
        assert!(ParameterAtlas::parse_rows("1 0.5", &[0.0], &[1.0]).is_err());
        assert!(ParameterAtlas::parse_rows("1 0.5 -1", &[0.0], &[1.0]).is_err());
        assert!(ParameterAtlas::parse_rows("1 nan 0.1", &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn overlap_is_detected() {
        let mut a = ParameterAtlas::tile(&[0.0, 0.0], &[1.0, 1.0], 0.25, 0).unwrap();
        let dup = a.boxes[0].clone();
        a.boxes.push(dup);
        assert!(!a.check_structure(None).is_empty());
    }

    #[test]
    fn frequency_map_identity_and_bound() {
        let f = FrequencyMap::identity(2);
        assert_eq!(f.eval(&[1.5, 1.25]), vec![1.5, 1.25]);
        assert_eq!(f.lipschitz_bound(&[1.0, 1.0], &[2.0, 2.0]), 1.0);
        let sq = FrequencyMap {
            terms: vec![vec![(1.0, vec![2])]],
        };
        assert_eq!(sq.lipschitz_bound(&[-3.0], &[1.0]), 6.0);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let p = |x: &[f64]| x[0] > 0.25;
        let a = excluded_fraction_mc(&[0.0], &[1.0], 20_000, 9, p);
        let b = excluded_fraction_mc(&[0.0], &[1.0], 20_000, 9, p);
        assert_eq!(a, b);
        assert!((a.fraction - 0.25).abs() < 5.0 * a.stderr);
    }
}
