//! Taylor-Fourier jets `Σ f_{abc}(x) y^a z^b z̄^c` on `T^d × R^d × C^n × C^n`,
//! the Poisson bracket, weighted vector-field norms and the time-1 Lie series.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fourier::{norm_l1, FourierSeries, C64, I, ZERO};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JetError {
    #[error("jet dimensions differ: (d,n)=({0},{1}) vs ({2},{3})")]
    DimMismatch(usize, usize, usize, usize),
    #[error("Lie series not converging: term {order} has norm {norm:.3e} > previous {previous:.3e}")]
    NonConvergent { order: usize, norm: f64, previous: f64 },
    #[error("bad jet literal: {0}")]
    BadLiteral(String),
}

/// Exponents `(a, b, c)` of `y^a z^b z̄^c`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Monomial {
    pub y: Vec<u8>,
    pub z: Vec<u8>,
    pub zb: Vec<u8>,
}

impl Monomial {
    pub fn one(d: usize, n: usize) -> Self {
        Monomial {
            y: vec![0; d],
            z: vec![0; n],
            zb: vec![0; n],
        }
    }

    pub fn y(d: usize, n: usize, i: usize) -> Self {
        let mut m = Self::one(d, n);
        m.y[i] = 1;
        m
    }

    pub fn z(d: usize, n: usize, i: usize) -> Self {
        let mut m = Self::one(d, n);
        m.z[i] = 1;
        m
    }

    pub fn zb(d: usize, n: usize, i: usize) -> Self {
        let mut m = Self::one(d, n);
        m.zb[i] = 1;
        m
    }

    /// `z_i z_j`.
    pub fn zz(d: usize, n: usize, i: usize, j: usize) -> Self {
        let mut m = Self::one(d, n);
        m.z[i] += 1;
        m.z[j] += 1;
        m
    }

    /// `z̄_i z̄_j`.
    pub fn zbzb(d: usize, n: usize, i: usize, j: usize) -> Self {
        let mut m = Self::one(d, n);
        m.zb[i] += 1;
        m.zb[j] += 1;
        m
    }

    /// `z_i z̄_j`.
    pub fn zzb(d: usize, n: usize, i: usize, j: usize) -> Self {
        let mut m = Self::one(d, n);
        m.z[i] += 1;
        m.zb[j] += 1;
        m
    }

    /// `2|a| + |b| + |c|`.
    pub fn weighted_degree(&self) -> u32 {
        let s = |v: &[u8]| v.iter().map(|&e| e as u32).sum::<u32>();
        2 * s(&self.y) + s(&self.z) + s(&self.zb)
    }

    pub fn times(&self, other: &Self) -> Self {
        let add = |a: &[u8], b: &[u8]| a.iter().zip(b).map(|(x, y)| x + y).collect();
        Monomial {
            y: add(&self.y, &other.y),
            z: add(&self.z, &other.z),
            zb: add(&self.zb, &other.zb),
        }
    }

    /// Swaps `z` and `z̄` exponents.
    pub fn conj(&self) -> Self {
        Monomial {
            y: self.y.clone(),
            z: self.zb.clone(),
            zb: self.z.clone(),
        }
    }

    fn lower(v: &[u8], i: usize) -> Option<(f64, Vec<u8>)> {
        if v[i] == 0 {
            return None;
        }
        let mut w = v.to_vec();
        w[i] -= 1;
        Some((v[i] as f64, w))
    }

    pub fn d_y(&self, i: usize) -> Option<(f64, Self)> {
        Self::lower(&self.y, i).map(|(f, y)| (f, Monomial { y, ..self.clone() }))
    }

    pub fn d_z(&self, i: usize) -> Option<(f64, Self)> {
        Self::lower(&self.z, i).map(|(f, z)| (f, Monomial { z, ..self.clone() }))
    }

    pub fn d_zb(&self, i: usize) -> Option<(f64, Self)> {
        Self::lower(&self.zb, i).map(|(f, zb)| (f, Monomial { zb, ..self.clone() }))
    }

    /// Every monomial of weighted degree `≤ max_degree`, in `Ord` order.
    pub fn all_up_to(d: usize, n: usize, max_degree: u32) -> Vec<Monomial> {
        let slots = d + 2 * n;
        let weight = |i: usize| if i < d { 2 } else { 1 };
        let mut out = Vec::new();
        let mut exps = vec![0u8; slots];
        fn rec(i: usize, left: u32, exps: &mut Vec<u8>, weight: &dyn Fn(usize) -> u32, out: &mut Vec<Vec<u8>>) {
            if i == exps.len() {
                out.push(exps.clone());
                return;
            }
            let w = weight(i);
            let mut e = 0u32;
            while e * w <= left {
                exps[i] = e as u8;
                rec(i + 1, left - e * w, exps, weight, out);
                e += 1;
            }
            exps[i] = 0;
        }
        let mut raw = Vec::new();
        rec(0, max_degree, &mut exps, &weight, &mut raw);
        for e in raw {
            out.push(Monomial {
                y: e[..d].to_vec(),
                z: e[d..d + n].to_vec(),
                zb: e[d + n..].to_vec(),
            });
        }
        out.sort();
        out
    }

    /// `1`, or factors such as `y0 z1^2 zb0`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (name, v) in [("y", &self.y), ("z", &self.z), ("zb", &self.zb)] {
            for (i, &e) in v.iter().enumerate() {
                match e {
                    0 => {}
                    1 => parts.push(format!("{name}{i}")),
                    _ => parts.push(format!("{name}{i}^{e}")),
                }
            }
        }
        if parts.is_empty() {
            "1".into()
        } else {
            parts.join(" ")
        }
    }

    /// Inverse of [`Monomial::label`].
    pub fn parse_label(text: &str, d: usize, n: usize) -> Result<Monomial, JetError> {
        let mut m = Monomial::one(d, n);
        let t = text.trim();
        if t == "1" {
            return Ok(m);
        }
        if t.is_empty() {
            return Err(JetError::BadLiteral("empty monomial".into()));
        }
        for tok in t.split_whitespace() {
            let (base, pow) = match tok.split_once('^') {
                Some((b, p)) => (
                    b,
                    p.parse::<u8>()
                        .map_err(|_| JetError::BadLiteral(format!("bad power in `{tok}`")))?,
                ),
                None => (tok, 1),
            };
            let (slot, idx) = if let Some(r) = base.strip_prefix("zb") {
                (2, r)
            } else if let Some(r) = base.strip_prefix('z') {
                (1, r)
            } else if let Some(r) = base.strip_prefix('y') {
                (0, r)
            } else {
                return Err(JetError::BadLiteral(format!("unknown factor `{tok}`")));
            };
            let i: usize = idx
                .parse()
                .map_err(|_| JetError::BadLiteral(format!("bad index in `{tok}`")))?;
            let v = match slot {
                0 => &mut m.y,
                1 => &mut m.z,
                _ => &mut m.zb,
            };
            if i >= v.len() {
                return Err(JetError::BadLiteral(format!("index out of range in `{tok}`")));
            }
            v[i] = v[i]
                .checked_add(pow)
                .filter(|&e| e <= 16)
                .ok_or_else(|| JetError::BadLiteral(format!("power too large in `{tok}`")))?;
        }
        Ok(m)
    }

    /// `a! b! c!`, the factor between a Taylor coefficient and the derivative at 0.
    pub fn factorial(&self) -> f64 {
        let f = |v: &[u8]| v.iter().map(|&e| (1..=e as u32).product::<u32>() as f64).product::<f64>();
        f(&self.y) * f(&self.z) * f(&self.zb)
    }
}

/// Weighted-norm summaries of a coefficient series: `Σ|f̂|e^{s|k|}` and per-axis `Σ|k_j||f̂|e^{s|k|}`.
#[derive(Debug, Clone)]
struct CoefNorms {
    val: f64,
    grad: Vec<f64>,
}

impl CoefNorms {
    fn of(f: &FourierSeries, s: f64) -> Self {
        let d = f.dim();
        let mut val = 0.0;
        let mut grad = vec![0.0; d];
        for (k, blk) in f.modes() {
            let a = blk[0].norm() * (s * norm_l1(&k) as f64).exp();
            val += a;
            for j in 0..d {
                grad[j] += a * k[j].unsigned_abs() as f64;
            }
        }
        CoefNorms { val, grad }
    }
}

/// Per-component sup bounds of `X_P = (∂_y P, −∂_x P, i∂_z̄ P, −i∂_z P)`.
#[derive(Debug, Clone)]
struct Components {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    zb: Vec<f64>,
}

impl Components {
    fn new(d: usize, n: usize) -> Self {
        Components {
            x: vec![0.0; d],
            y: vec![0.0; d],
            z: vec![0.0; n],
            zb: vec![0.0; n],
        }
    }

    fn add_monomial(&mut self, m: &Monomial, c: &CoefNorms, r: f64) {
        let deg = m.weighted_degree() as i32;
        let pw = |e: i32| r.powi(e);
        for j in 0..self.x.len() {
            if m.y[j] > 0 {
                self.x[j] += m.y[j] as f64 * c.val * pw(deg - 2);
            }
            self.y[j] += c.grad[j] * pw(deg);
        }
        for j in 0..self.z.len() {
            if m.zb[j] > 0 {
                self.z[j] += m.zb[j] as f64 * c.val * pw(deg - 1);
            }
            if m.z[j] > 0 {
                self.zb[j] += m.z[j] as f64 * c.val * pw(deg - 1);
            }
        }
    }

    fn weighted(&self, r: f64) -> f64 {
        let e = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        e(&self.x) + e(&self.y) / (r * r) + (e(&self.z) + e(&self.zb)) / r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianJet {
    d: usize,
    n: usize,
    max_degree: u32,
    cutoff: usize,
    /// Domain `(s, r)` at which dropped pieces are measured.
    reference: (f64, f64),
    terms: BTreeMap<Monomial, FourierSeries>,
    /// Norm of everything dropped by degree or Fourier truncation.
    remainder: f64,
}

#[derive(Debug, Clone)]
pub struct JetSplit {
    pub low: HamiltonianJet,
    pub high: HamiltonianJet,
}

#[derive(Debug, Clone)]
pub struct LieOutput {
    pub jet: HamiltonianJet,
    /// `vf_norm` of each term `ad_F^j H / j!`, `j = 1..=order`.
    pub term_norms: Vec<f64>,
    /// `vf_norm` of the first omitted term.
    pub tail_bound: f64,
}

impl HamiltonianJet {
    pub fn new(d: usize, n: usize, max_degree: u32, cutoff: usize, reference: (f64, f64)) -> Self {
        HamiltonianJet {
            d,
            n,
            max_degree,
            cutoff,
            reference,
            terms: BTreeMap::new(),
            remainder: 0.0,
        }
    }

    /// An empty jet with the same layout.
    pub fn empty_like(&self) -> Self {
        Self::new(self.d, self.n, self.max_degree, self.cutoff, self.reference)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn reference(&self) -> (f64, f64) {
        self.reference
    }

    pub fn set_reference(&mut self, reference: (f64, f64)) {
        self.reference = reference;
    }

    pub fn remainder(&self) -> f64 {
        self.remainder
    }

    pub fn add_remainder(&mut self, v: f64) {
        self.remainder += v;
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &FourierSeries)> {
        self.terms.iter()
    }

    pub fn get(&self, m: &Monomial) -> Option<&FourierSeries> {
        self.terms.get(m)
    }

    /// Coefficient of `m`, or the zero series.
    pub fn coeff(&self, m: &Monomial) -> FourierSeries {
        self.terms
            .get(m)
            .cloned()
            .unwrap_or_else(|| FourierSeries::scalar_zeros(self.d, 0))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.values().all(|f| f.is_zero())
    }

    fn dropped_norm(&self, m: &Monomial, f: &FourierSeries) -> f64 {
        let (s, r) = self.reference;
        let mut c = Components::new(self.d, self.n);
        c.add_monomial(m, &CoefNorms::of(f, s), r);
        c.weighted(r)
    }

    /// Adds `f · m`, dropping (into the remainder) anything above the degree cap or cutoff.
    pub fn add_term(&mut self, m: Monomial, f: &FourierSeries) {
        assert_eq!(m.y.len(), self.d);
        assert_eq!(m.z.len(), self.n);
        assert_eq!(f.shape(), (1, 1));
        if f.is_zero() {
            return;
        }
        if m.weighted_degree() > self.max_degree {
            self.remainder += self.dropped_norm(&m, f);
            return;
        }
        let f = if f.cutoff() > self.cutoff {
            let tail = f.tail(self.cutoff);
            if !tail.is_zero() {
                self.remainder += self.dropped_norm(&m, &tail);
            }
            f.truncate(self.cutoff)
        } else {
            f.clone()
        };
        match self.terms.get_mut(&m) {
            Some(g) => *g += &f,
            None => {
                self.terms.insert(m, f);
            }
        }
    }

    /// Replaces the coefficient of `m`.
    pub fn set_term(&mut self, m: Monomial, f: &FourierSeries) {
        self.terms.remove(&m);
        self.add_term(m, f);
    }

    pub fn remove_term(&mut self, m: &Monomial) -> Option<FourierSeries> {
        self.terms.remove(m)
    }

    pub fn scale(&self, c: C64) -> Self {
        let mut out = self.clone();
        for f in out.terms.values_mut() {
            *f = f.scale(c);
        }
        out.remainder *= c.norm();
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self, JetError> {
        self.check_dims(other)?;
        let mut out = self.clone();
        for (m, f) in &other.terms {
            out.add_term(m.clone(), f);
        }
        out.remainder += other.remainder;
        Ok(out)
    }

    /// `self − other`; remainders add since they are norm bounds.
    pub fn sub(&self, other: &Self) -> Result<Self, JetError> {
        self.check_dims(other)?;
        let mut out = self.clone();
        for (m, f) in &other.terms {
            out.add_term(m.clone(), &f.scale_re(-1.0));
        }
        out.remainder += other.remainder;
        Ok(out)
    }

    fn check_dims(&self, other: &Self) -> Result<(), JetError> {
        if self.d != other.d || self.n != other.n {
            return Err(JetError::DimMismatch(self.d, self.n, other.d, other.n));
        }
        Ok(())
    }

    /// Applies `g` to every coefficient; the remainder is kept.
    pub fn map_coefficients(&self, g: impl Fn(&FourierSeries) -> FourierSeries) -> Self {
        let mut out = self.empty_like();
        for (m, f) in &self.terms {
            out.add_term(m.clone(), &g(f));
        }
        out.remainder = self.remainder;
        out
    }

    /// Line format, one Fourier mode per line: `<monomial> @ <k1,..,kd> = <re> [<im>]`.
    /// `#` starts a comment. Repeated lines add up.
    pub fn parse_literal(
        text: &str,
        d: usize,
        n: usize,
        max_degree: u32,
        cutoff: usize,
        reference: (f64, f64),
    ) -> Result<Self, JetError> {
        let mut jet = HamiltonianJet::new(d, n, max_degree, cutoff, reference);
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| JetError::BadLiteral(format!("line {}: {why}", ln + 1));
            let (mono, rest) = line.split_once('@').ok_or_else(|| bad("missing `@`"))?;
            let (ks, val) = rest.split_once('=').ok_or_else(|| bad("missing `=`"))?;
            let m = Monomial::parse_label(mono, d, n).map_err(|e| bad(&e.to_string()))?;
            let k: Vec<i32> = ks
                .split(',')
                .map(|t| t.trim().parse::<i32>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad("bad mode"))?;
            if k.len() != d {
                return Err(bad(&format!("mode has {} entries, expected {d}", k.len())));
            }
            if k.iter().any(|v| v.unsigned_abs() as usize > cutoff) {
                return Err(bad("mode beyond cutoff"));
            }
            let nums: Vec<f64> = val
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad("bad value"))?;
            let c = match nums.as_slice() {
                [re] => C64::new(*re, 0.0),
                [re, im] => C64::new(*re, *im),
                _ => return Err(bad("expected `re` or `re im`")),
            };
            if !c.re.is_finite() || !c.im.is_finite() {
                return Err(bad("non-finite value"));
            }
            jet.add_term(m, &FourierSeries::from_modes(d, &[(k, c)]));
        }
        Ok(jet)
    }

    /// Inverse of [`HamiltonianJet::parse_literal`] (nonzero modes only, full precision).
    pub fn to_literal(&self) -> String {
        let mut out = String::new();
        for (m, f) in &self.terms {
            for (k, blk) in f.modes() {
                let v = blk[0];
                if v == ZERO {
                    continue;
                }
                let ks: Vec<String> = k.iter().map(|v| v.to_string()).collect();
                out.push_str(&format!("{} @ {} = {:e} {:e}\n", m.label(), ks.join(","), v.re, v.im));
            }
        }
        out
    }

    /// Drops coefficients that are exactly zero.
    pub fn prune(&mut self) {
        self.terms.retain(|_, f| !f.is_zero());
    }

    /// Computable upper bound for the weighted norm of `X_P` on `D(s, r)`.
    pub fn vf_norm(&self, s: f64, r: f64) -> f64 {
        let mut c = Components::new(self.d, self.n);
        for (m, f) in &self.terms {
            c.add_monomial(m, &CoefNorms::of(f, s), r);
        }
        c.weighted(r) + self.scaled_remainder(s, r)
    }

    fn scaled_remainder(&self, s: f64, r: f64) -> f64 {
        if self.remainder == 0.0 {
            return 0.0;
        }
        let (s0, r0) = self.reference;
        let rf = (r0 / r).powi(2).max(1.0);
        let sf = ((s - s0) * 2.0 * (self.d * self.cutoff) as f64).exp().max(1.0);
        self.remainder * rf * sf
    }

    /// Low part: weighted degree ≤ 2. High part: the rest.
    pub fn split_low_high(&self) -> JetSplit {
        let mut low = self.empty_like();
        let mut high = self.empty_like();
        for (m, f) in &self.terms {
            if m.weighted_degree() <= 2 {
                low.terms.insert(m.clone(), f.clone());
            } else {
                high.terms.insert(m.clone(), f.clone());
            }
        }
        low.remainder = self.remainder;
        high.remainder = self.remainder;
        JetSplit { low, high }
    }

    /// Max of `|conj(f_{abc}(k)) − f_{acb}(−k)|` over all stored signatures.
    pub fn reality_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let zero = FourierSeries::scalar_zeros(self.d, 0);
        for (m, f) in &self.terms {
            let mc = m.conj();
            let g = self.terms.get(&mc).unwrap_or(&zero);
            worst = worst.max(f.conj_function().max_abs_diff(g));
        }
        worst
    }

    pub fn check_reality(&self, tol: f64) -> (bool, f64) {
        let v = self.reality_violation();
        (v <= tol, v)
    }

    /// The conjugate-image jet `(a,b,c) ↦ conj(f_{acb}(−k))`.
    pub fn conjugate_image(&self) -> Self {
        let mut out = self.empty_like();
        for (m, f) in &self.terms {
            out.terms.insert(m.conj(), f.conj_function());
        }
        out.remainder = self.remainder;
        out
    }

    /// Average of the jet and its conjugate image; passes the reality check.
    pub fn realify(&self) -> Self {
        let mut out = self.add(&self.conjugate_image()).expect("same layout").scale(C64::new(0.5, 0.0));
        out.remainder = self.remainder;
        out
    }

    /// `{F, G} = ⟨F_x,G_y⟩ − ⟨F_y,G_x⟩ + i⟨F_z,G_z̄⟩ − i⟨F_z̄,G_z⟩`; the result uses `self`'s layout.
    pub fn poisson_bracket(&self, g: &Self) -> Result<Self, JetError> {
        self.check_dims(g)?;
        let (d, n) = (self.d, self.n);
        let pairs: Vec<(&Monomial, &FourierSeries, &Monomial, &FourierSeries)> = self
            .terms
            .iter()
            .flat_map(|(mf, ff)| g.terms.iter().map(move |(mg, fg)| (mf, ff, mg, fg)))
            .collect();
        let parts: Vec<Vec<(Monomial, FourierSeries)>> = pairs
            .par_iter()
            .map(|&(mf, ff, mg, fg)| {
                let mut out = Vec::new();
                for j in 0..d {
                    if let Some((a, rest)) = mg.d_y(j) {
                        let dxf = ff.partial(j);
                        if !dxf.is_zero() {
                            out.push((mf.times(&rest), (&dxf * fg).scale_re(a)));
                        }
                    }
                    if let Some((a, rest)) = mf.d_y(j) {
                        let dxg = fg.partial(j);
                        if !dxg.is_zero() {
                            out.push((rest.times(mg), (ff * &dxg).scale_re(-a)));
                        }
                    }
                }
                for k in 0..n {
                    if let (Some((a, rf)), Some((b, rg))) = (mf.d_z(k), mg.d_zb(k)) {
                        out.push((rf.times(&rg), (ff * fg).scale(I * (a * b))));
                    }
                    if let (Some((a, rf)), Some((b, rg))) = (mf.d_zb(k), mg.d_z(k)) {
                        out.push((rf.times(&rg), (ff * fg).scale(-I * (a * b))));
                    }
                }
                out
            })
            .collect();
        let mut res = self.empty_like();
        for part in parts {
            for (m, f) in part {
                res.add_term(m, &f);
            }
        }
        // A bracket of two jets with remainders: bound the cross terms crudely.
        if self.remainder > 0.0 || g.remainder > 0.0 {
            let (s, r) = self.reference;
            let nf = self.vf_norm(s, r);
            let ng = g.vf_norm(s, r);
            res.remainder += self.remainder * ng + g.remainder * nf;
        }
        res.prune();
        Ok(res)
    }

    /// `Σ_{j=0..order} ad_F^j H / j!` with `ad_F H = {H, F}`.
    pub fn lie_transform(&self, f: &Self, order: usize) -> Result<LieOutput, JetError> {
        let inc = self.lie_increment(f, order)?;
        let mut jet = self.add(&inc.jet)?;
        jet.remainder = self.remainder + inc.jet.remainder;
        Ok(LieOutput { jet, ..inc })
    }

    /// `Σ_{j=1..order} ad_F^j H / j!`, i.e. the Lie transform minus `H`.
    pub fn lie_increment(&self, f: &Self, order: usize) -> Result<LieOutput, JetError> {
        let (s, r) = self.reference;
        let mut term = self.clone();
        term.remainder = 0.0;
        let mut acc = self.empty_like();
        let mut norms = Vec::with_capacity(order);
        for j in 1..=order {
            term = term.poisson_bracket(f)?.scale(C64::new(1.0 / j as f64, 0.0));
            let nrm = term.vf_norm(s, r);
            if j >= 2 {
                let prev = norms[j - 2];
                if nrm > prev && nrm > 1e-300 && prev > 0.0 {
                    return Err(JetError::NonConvergent {
                        order: j,
                        norm: nrm,
                        previous: prev,
                    });
                }
            }
            norms.push(nrm);
            acc = acc.add(&term)?;
        }
        let tail_bound = if f.is_zero() {
            0.0
        } else {
            term.poisson_bracket(f)?
                .scale(C64::new(1.0 / (order + 1) as f64, 0.0))
                .vf_norm(s, r)
        };
        acc.remainder += tail_bound;
        Ok(LieOutput {
            jet: acc,
            term_norms: norms,
            tail_bound,
        })
    }

    /// Largest coefficientwise difference between two jets.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let zero = FourierSeries::scalar_zeros(self.d, 0);
        let mut worst: f64 = 0.0;
        for (m, f) in &self.terms {
            worst = worst.max(f.max_abs_diff(other.terms.get(m).unwrap_or(&zero)));
        }
        for (m, g) in &other.terms {
            if !self.terms.contains_key(m) {
                worst = worst.max(g.max_abs());
            }
        }
        worst
    }

    /// Value at a real phase point `(x, y, z, z̄)`.
    pub fn eval(&self, x: &[f64], y: &[C64], z: &[C64], zb: &[C64]) -> C64 {
        let mut acc = ZERO;
        for (m, f) in &self.terms {
            let mut mono = f.eval(x)[0];
            for (v, &e) in y.iter().zip(&m.y) {
                mono *= v.powu(e as u32);
            }
            for (v, &e) in z.iter().zip(&m.z) {
                mono *= v.powu(e as u32);
            }
            for (v, &e) in zb.iter().zip(&m.zb) {
                mono *= v.powu(e as u32);
            }
            acc += mono;
        }
        acc
    }
}

/// `E = ⟨ω, y⟩ + ⟨Ω z, z̄⟩ + ⟨B(x) z, z̄⟩`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalForm {
    pub omega: Vec<f64>,
    pub big_omega: Vec<f64>,
    /// `n × n`; entry `(j, k)` multiplies `z̄_j z_k`.
    pub b: FourierSeries,
}

impl NormalForm {
    pub fn new(omega: Vec<f64>, big_omega: Vec<f64>) -> Self {
        let d = omega.len();
        let n = big_omega.len();
        NormalForm {
            omega,
            big_omega,
            b: FourierSeries::zeros(d, 0, n, n),
        }
    }

    pub fn d(&self) -> usize {
        self.omega.len()
    }

    pub fn n(&self) -> usize {
        self.big_omega.len()
    }

    /// Self-adjointness defect `max |B̂_{jk}(k) − conj(B̂_{kj}(−k))|`, i.e. `B(x) = B(x)*` for real `x`.
    ///
    /// For `n = 1` this is the reality defect of the scalar `B`.
    pub fn symmetry_error(&self) -> f64 {
        self.b.max_abs_diff(&self.b.conj_function().transpose())
    }

    /// `max |B_{jk} − B_{kj}|` together with the reality defect of each entry.
    pub fn real_symmetry_error(&self) -> f64 {
        self.b.symmetry_violation().max(self.b.reality_violation())
    }

    pub fn to_jet(&self, layout: &HamiltonianJet) -> HamiltonianJet {
        let (d, n) = (self.d(), self.n());
        let mut e = layout.empty_like();
        for i in 0..d {
            e.add_term(Monomial::y(d, n, i), &FourierSeries::constant(d, C64::new(self.omega[i], 0.0)));
        }
        for j in 0..n {
            e.add_term(
                Monomial::zzb(d, n, j, j),
                &FourierSeries::constant(d, C64::new(self.big_omega[j], 0.0)),
            );
        }
        e.add_jet_zzb(&self.b);
        e
    }
}

impl HamiltonianJet {
    /// Adds `⟨M z, z̄⟩ = Σ M_{jk} z̄_j z_k`.
    pub fn add_jet_zzb(&mut self, m: &FourierSeries) {
        let (d, n) = (self.d, self.n);
        for j in 0..n {
            for k in 0..n {
                let s = m.entry_series(j, k);
                if !s.is_zero() {
                    self.add_term(Monomial::zzb(d, n, k, j), &s);
                }
            }
        }
    }

    /// `M` with `⟨M z, z̄⟩` the `z z̄` part of the jet.
    pub fn zzb_matrix(&self) -> FourierSeries {
        let (d, n) = (self.d, self.n);
        let entries: Vec<FourierSeries> = (0..n)
            .flat_map(|j| (0..n).map(move |k| (j, k)))
            .map(|(j, k)| self.coeff(&Monomial::zzb(d, n, k, j)))
            .collect();
        FourierSeries::from_entries(d, n, n, &entries)
    }

    /// The jet restricted to the `z z̄` monomials.
    pub fn zzb_part(&self) -> HamiltonianJet {
        let mut out = self.empty_like();
        out.add_jet_zzb(&self.zzb_matrix());
        out
    }
}
