//! Truncated Fourier series on the torus `T^d` with scalar, vector or matrix
//! coefficients, and the strip-analyticity norm `Σ |f̂(k)| e^{s|k|_1}`.
//!
//! Coefficients are stored densely over the cube `[-N, N]^d`; only nonzero
//! modes are visited by the arithmetic.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub type C64 = Complex64;

/// A lattice index `k ∈ Z^d`.
pub type FourierIndex = Vec<i32>;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const I: C64 = C64 { re: 0.0, im: 1.0 };

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FourierError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("bad literal entry {index}: {reason}")]
    BadLiteral { index: usize, reason: String },
}

pub fn norm_inf(k: &[i32]) -> u32 {
    k.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)
}

pub fn norm_l1(k: &[i32]) -> u32 {
    k.iter().map(|v| v.unsigned_abs()).sum()
}

pub fn dot(k: &[i32], w: &[f64]) -> f64 {
    k.iter().zip(w).map(|(a, b)| *a as f64 * b).sum()
}

/// Enumerates `[-n, n]^d` with axis 0 varying fastest.
pub fn cube(dim: usize, n: usize) -> Vec<FourierIndex> {
    let side = 2 * n + 1;
    let count = side.pow(dim as u32);
    (0..count).map(|i| unflatten(i, dim, n)).collect()
}

fn unflatten(mut idx: usize, dim: usize, n: usize) -> FourierIndex {
    let side = 2 * n + 1;
    let mut k = Vec::with_capacity(dim);
    for _ in 0..dim {
        k.push((idx % side) as i32 - n as i32);
        idx /= side;
    }
    k
}

fn flatten(k: &[i32], n: usize) -> Option<usize> {
    let side = 2 * n + 1;
    let mut idx = 0usize;
    let mut stride = 1usize;
    for &v in k {
        if v.unsigned_abs() as usize > n {
            return None;
        }
        idx += (v + n as i32) as usize * stride;
        stride *= side;
    }
    Some(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierSeries {
    dim: usize,
    cutoff: usize,
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl FourierSeries {
    pub fn zeros(dim: usize, cutoff: usize, rows: usize, cols: usize) -> Self {
        assert!(dim >= 1, "torus dimension must be positive");
        let modes = (2 * cutoff + 1).pow(dim as u32);
        FourierSeries {
            dim,
            cutoff,
            rows,
            cols,
            data: vec![ZERO; modes * rows * cols],
        }
    }

    pub fn scalar_zeros(dim: usize, cutoff: usize) -> Self {
        Self::zeros(dim, cutoff, 1, 1)
    }

    pub fn constant(dim: usize, c: C64) -> Self {
        let mut f = Self::scalar_zeros(dim, 0);
        f.data[0] = c;
        f
    }

    /// Constant matrix-valued series with the given row-major entries.
    pub fn constant_matrix(dim: usize, rows: usize, cols: usize, entries: &[C64]) -> Self {
        assert_eq!(entries.len(), rows * cols);
        let mut f = Self::zeros(dim, 0, rows, cols);
        f.data.copy_from_slice(entries);
        f
    }

    pub fn identity(dim: usize, n: usize) -> Self {
        let mut f = Self::zeros(dim, 0, n, n);
        for j in 0..n {
            f.data[j * n + j] = ONE;
        }
        f
    }

    /// Scalar series from `(k, value)` pairs; the cutoff is the largest `|k|_∞`.
    pub fn from_modes(dim: usize, modes: &[(FourierIndex, C64)]) -> Self {
        let cutoff = modes.iter().map(|(k, _)| norm_inf(k) as usize).max().unwrap_or(0);
        let mut f = Self::scalar_zeros(dim, cutoff);
        for (k, v) in modes {
            assert_eq!(k.len(), dim);
            let idx = flatten(k, cutoff).expect("mode within cutoff");
            f.data[idx] += *v;
        }
        f
    }

    /// Scalar series from literal entries `(k, re, im)`.
    pub fn from_literal(dim: usize, entries: &[(Vec<i64>, f64, f64)]) -> Result<Self, FourierError> {
        let mut modes = Vec::with_capacity(entries.len());
        for (index, (k, re, im)) in entries.iter().enumerate() {
            if k.len() != dim {
                return Err(FourierError::BadLiteral {
                    index,
                    reason: format!("index has length {} but d = {}", k.len(), dim),
                });
            }
            if !re.is_finite() || !im.is_finite() {
                return Err(FourierError::BadLiteral {
                    index,
                    reason: "non-finite coefficient".into(),
                });
            }
            let mut kk = Vec::with_capacity(dim);
            for &v in k {
                if v.unsigned_abs() > 4096 {
                    return Err(FourierError::BadLiteral {
                        index,
                        reason: format!("mode component {v} out of range"),
                    });
                }
                kk.push(v as i32);
            }
            modes.push((kk, C64::new(*re, *im)));
        }
        Ok(Self::from_modes(dim, &modes))
    }

    /// `Σ_{0<|k|_∞≤cutoff} amp·e^{-rate|k|_1} e^{i⟨k,x⟩}` plus `mean`; real and even.
    pub fn analytic(dim: usize, cutoff: usize, amp: f64, rate: f64, mean: f64) -> Self {
        let mut f = Self::scalar_zeros(dim, cutoff);
        for (idx, k) in cube(dim, cutoff).into_iter().enumerate() {
            let v = if k.iter().all(|&c| c == 0) {
                mean
            } else {
                amp * (-rate * norm_l1(&k) as f64).exp()
            };
            f.data[idx] = C64::new(v, 0.0);
        }
        f
    }

    pub fn cos_mode(dim: usize, k: &[i32], amp: f64) -> Self {
        let minus: Vec<i32> = k.iter().map(|v| -v).collect();
        Self::from_modes(
            dim,
            &[(k.to_vec(), C64::new(amp / 2.0, 0.0)), (minus, C64::new(amp / 2.0, 0.0))],
        )
    }

    pub fn sin_mode(dim: usize, k: &[i32], amp: f64) -> Self {
        let minus: Vec<i32> = k.iter().map(|v| -v).collect();
        Self::from_modes(
            dim,
            &[(k.to_vec(), C64::new(0.0, -amp / 2.0)), (minus, C64::new(0.0, amp / 2.0))],
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn block(&self) -> usize {
        self.rows * self.cols
    }

    pub fn num_modes(&self) -> usize {
        (2 * self.cutoff + 1).pow(self.dim as u32)
    }

    pub fn mode_index(&self, k: &[i32]) -> Option<usize> {
        if k.len() != self.dim {
            return None;
        }
        flatten(k, self.cutoff)
    }

    pub fn mode_at(&self, idx: usize) -> FourierIndex {
        unflatten(idx, self.dim, self.cutoff)
    }

    /// Coefficient block at `k` (row-major), or `None` outside the cutoff.
    pub fn coeff(&self, k: &[i32]) -> Option<&[C64]> {
        let b = self.block();
        self.mode_index(k).map(|i| &self.data[i * b..(i + 1) * b])
    }

    /// Coefficient block at `a − b` without allocating the difference.
    pub fn coeff_diff(&self, a: &[i32], b: &[i32]) -> Option<&[C64]> {
        let side = 2 * self.cutoff + 1;
        let n = self.cutoff as i32;
        let mut idx = 0usize;
        let mut stride = 1usize;
        for (x, y) in a.iter().zip(b) {
            let v = x - y;
            if v.abs() > n {
                return None;
            }
            idx += (v + n) as usize * stride;
            stride *= side;
        }
        let bl = self.block();
        Some(&self.data[idx * bl..(idx + 1) * bl])
    }

    pub fn entry(&self, k: &[i32], r: usize, c: usize) -> C64 {
        match self.coeff(k) {
            Some(blk) => blk[r * self.cols + c],
            None => ZERO,
        }
    }

    /// Scalar coefficient at `k` (entry (0,0)).
    pub fn get(&self, k: &[i32]) -> C64 {
        self.entry(k, 0, 0)
    }

    /// Sets an entry, growing the cutoff when `k` lies outside it.
    pub fn set_entry(&mut self, k: &[i32], r: usize, c: usize, v: C64) {
        let need = norm_inf(k) as usize;
        if need > self.cutoff {
            *self = self.with_cutoff(need);
        }
        let b = self.block();
        let idx = self.mode_index(k).expect("index dimension");
        self.data[idx * b + r * self.cols + c] = v;
    }

    pub fn add_entry(&mut self, k: &[i32], r: usize, c: usize, v: C64) {
        let cur = self.entry(k, r, c);
        self.set_entry(k, r, c, cur + v);
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    /// Nonzero modes in storage order.
    pub fn modes(&self) -> impl Iterator<Item = (FourierIndex, &[C64])> + '_ {
        let b = self.block();
        self.data
            .chunks(b)
            .enumerate()
            .filter(|(_, blk)| blk.iter().any(|v| *v != ZERO))
            .map(move |(i, blk)| (unflatten(i, self.dim, self.cutoff), blk))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == ZERO)
    }

    /// Largest `|k|_∞` carrying a nonzero coefficient.
    pub fn effective_cutoff(&self) -> usize {
        self.modes().map(|(k, _)| norm_inf(&k) as usize).max().unwrap_or(0)
    }

    /// Re-embeds into the cube `[-n, n]^d`, dropping modes outside.
    pub fn with_cutoff(&self, n: usize) -> Self {
        if n == self.cutoff {
            return self.clone();
        }
        let mut out = Self::zeros(self.dim, n, self.rows, self.cols);
        let b = self.block();
        for (i, blk) in self.data.chunks(b).enumerate() {
            if blk.iter().all(|v| *v == ZERO) {
                continue;
            }
            let k = unflatten(i, self.dim, self.cutoff);
            if let Some(j) = flatten(&k, n) {
                out.data[j * b..(j + 1) * b].copy_from_slice(blk);
            }
        }
        out
    }

    /// `Γ_N f`: keeps exactly the modes with `|k|_∞ ≤ n`.
    pub fn truncate(&self, n: usize) -> Self {
        self.with_cutoff(n.min(self.cutoff))
    }

    /// `(1 − Γ_N) f`.
    pub fn tail(&self, n: usize) -> Self {
        let mut out = self.clone();
        let b = self.block();
        for (i, blk) in out.data.chunks_mut(b).enumerate() {
            let k = unflatten(i, self.dim, self.cutoff);
            if norm_inf(&k) as usize <= n {
                blk.iter_mut().for_each(|v| *v = ZERO);
            }
        }
        out
    }

    /// `Σ_k |f̂(k)| e^{s|k|_1}`, maximized over matrix entries.
    pub fn strip_norm(&self, s: f64) -> f64 {
        let b = self.block();
        let mut acc = vec![0.0f64; b];
        for (i, blk) in self.data.chunks(b).enumerate() {
            if blk.iter().all(|v| *v == ZERO) {
                continue;
            }
            let k = unflatten(i, self.dim, self.cutoff);
            let w = (s * norm_l1(&k) as f64).exp();
            for (a, v) in acc.iter_mut().zip(blk) {
                *a += v.norm() * w;
            }
        }
        acc.into_iter().fold(0.0, f64::max)
    }

    /// Weighted norm of a single entry.
    pub fn entry_strip_norm(&self, r: usize, c: usize, s: f64) -> f64 {
        let b = self.block();
        let off = r * self.cols + c;
        let mut acc = 0.0;
        for (i, blk) in self.data.chunks(b).enumerate() {
            let v = blk[off];
            if v != ZERO {
                let k = unflatten(i, self.dim, self.cutoff);
                acc += v.norm() * (s * norm_l1(&k) as f64).exp();
            }
        }
        acc
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Coefficientwise sup distance, comparing on the union of supports.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let n = self.cutoff.max(other.cutoff);
        let a = self.with_cutoff(n);
        let b = other.with_cutoff(n);
        a.data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    fn check_same(&self, other: &Self) -> Result<(), FourierError> {
        if self.dim != other.dim {
            return Err(FourierError::DimMismatch(self.dim, other.dim));
        }
        if self.shape() != other.shape() {
            return Err(FourierError::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Self) -> Result<Self, FourierError> {
        self.check_same(other)?;
        let n = self.cutoff.max(other.cutoff);
        let mut out = self.with_cutoff(n);
        let o = other.with_cutoff(n);
        for (a, b) in out.data.iter_mut().zip(&o.data) {
            *a += b;
        }
        Ok(out)
    }

    pub fn scale(&self, c: C64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        out
    }

    pub fn scale_re(&self, c: f64) -> Self {
        self.scale(C64::new(c, 0.0))
    }

    /// Matrix-rule product with coefficient convolution; cutoff adds.
    pub fn product(&self, other: &Self) -> Result<Self, FourierError> {
        if self.dim != other.dim {
            return Err(FourierError::DimMismatch(self.dim, other.dim));
        }
        if self.cols != other.rows {
            return Err(FourierError::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        let n = self.cutoff + other.cutoff;
        let mut out = Self::zeros(self.dim, n, self.rows, other.cols);
        let (r, m, c) = (self.rows, self.cols, other.cols);
        let fa = linear_support(self, n);
        let fb = linear_support(other, n);
        let base = flatten(&vec![0; self.dim], n).unwrap() as isize;
        let bo = r * c;
        if r == 1 && m == 1 && c == 1 {
            for &(la, ia) in &fa {
                let va = self.data[ia];
                for &(lb, ib) in &fb {
                    let j = (base + la + lb) as usize;
                    out.data[j] += va * other.data[ib];
                }
            }
            return Ok(out);
        }
        let ba = r * m;
        let bb = m * c;
        for &(la, ia) in &fa {
            let blk_a = &self.data[ia * ba..(ia + 1) * ba];
            for &(lb, ib) in &fb {
                let blk_b = &other.data[ib * bb..(ib + 1) * bb];
                let j = (base + la + lb) as usize;
                let dst = &mut out.data[j * bo..(j + 1) * bo];
                for i in 0..r {
                    for t in 0..m {
                        let a = blk_a[i * m + t];
                        if a == ZERO {
                            continue;
                        }
                        for q in 0..c {
                            dst[i * c + q] += a * blk_b[t * c + q];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Product with the series first truncated to the given cutoffs, result truncated to `out`.
    pub fn product_truncated(&self, other: &Self, out: usize) -> Result<Self, FourierError> {
        Ok(self.product(other)?.truncate(out))
    }

    /// `∂_ω f`: coefficient at `k` becomes `i⟨k,ω⟩ f̂(k)`.
    pub fn dir_derivative(&self, omega: &[f64]) -> Self {
        assert_eq!(omega.len(), self.dim);
        self.map_by_mode(|k| I * dot(k, omega))
    }

    /// `∂f/∂x_j`.
    pub fn partial(&self, j: usize) -> Self {
        self.map_by_mode(|k| I * k[j] as f64)
    }

    /// Multiplies each coefficient block by `m(k)`.
    pub fn map_by_mode(&self, m: impl Fn(&[i32]) -> C64) -> Self {
        let mut out = self.clone();
        let b = self.block();
        for (i, blk) in out.data.chunks_mut(b).enumerate() {
            if blk.iter().all(|v| *v == ZERO) {
                continue;
            }
            let k = unflatten(i, self.dim, self.cutoff);
            let w = m(&k);
            blk.iter_mut().for_each(|v| *v *= w);
        }
        out
    }

    /// The function `x ↦ conj(f(x))` for real `x`: `ĝ(k) = conj(f̂(−k))`.
    pub fn conj_function(&self) -> Self {
        let mut out = self.clone();
        let b = self.block();
        let m = self.num_modes();
        for i in 0..m {
            // Index of −k is the mirror index.
            let j = m - 1 - i;
            for e in 0..b {
                out.data[i * b + e] = self.data[j * b + e].conj();
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.dim, self.cutoff, self.cols, self.rows);
        let b = self.block();
        for i in 0..self.num_modes() {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    out.data[i * b + c * self.rows + r] = self.data[i * b + r * self.cols + c];
                }
            }
        }
        out
    }

    pub fn entry_series(&self, r: usize, c: usize) -> Self {
        let mut out = Self::scalar_zeros(self.dim, self.cutoff);
        let b = self.block();
        for i in 0..self.num_modes() {
            out.data[i] = self.data[i * b + r * self.cols + c];
        }
        out
    }

    /// Writes scalar series `s` into entry `(r, c)`, growing the cutoff if needed.
    pub fn set_entry_series(&mut self, r: usize, c: usize, s: &Self) {
        assert_eq!(s.shape(), (1, 1));
        let n = self.cutoff.max(s.cutoff);
        if n != self.cutoff {
            *self = self.with_cutoff(n);
        }
        let s = s.with_cutoff(n);
        let b = self.block();
        for i in 0..self.num_modes() {
            self.data[i * b + r * self.cols + c] = s.data[i];
        }
    }

    /// Assembles a matrix series from scalar entries (row-major, `rows*cols` of them).
    pub fn from_entries(dim: usize, rows: usize, cols: usize, entries: &[Self]) -> Self {
        assert_eq!(entries.len(), rows * cols);
        let n = entries.iter().map(|e| e.cutoff).max().unwrap_or(0);
        let mut out = Self::zeros(dim, n, rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.set_entry_series(r, c, &entries[r * cols + c]);
            }
        }
        out
    }

    /// The `k = 0` coefficient block.
    pub fn mean(&self) -> Vec<C64> {
        self.coeff(&vec![0; self.dim]).unwrap().to_vec()
    }

    /// Pointwise value at real `x` (row-major block).
    pub fn eval(&self, x: &[f64]) -> Vec<C64> {
        let b = self.block();
        let mut out = vec![ZERO; b];
        for (k, blk) in self.modes() {
            let ph = dot(&k, x);
            let e = C64::new(ph.cos(), ph.sin());
            for (o, v) in out.iter_mut().zip(blk) {
                *o += v * e;
            }
        }
        out
    }

    /// `max |conj(f̂(k)) − f̂(−k)|`: zero iff the series is real for real `x`.
    pub fn reality_violation(&self) -> f64 {
        self.max_abs_diff(&self.conj_function())
    }

    /// Symmetric defect `max |f̂_{rc}(k) − f̂_{cr}(k)|` of a square series.
    pub fn symmetry_violation(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        self.max_abs_diff(&self.transpose())
    }

    /// Largest coefficient magnitude, scaled by `e^{s|k|_1}`, over modes with `|k|_∞ > n`.
    pub fn tail_strip_norm(&self, n: usize, s: f64) -> f64 {
        self.tail(n).strip_norm(s)
    }
}

/// `(linear offset of k in the cube of radius n, storage index)` for each nonzero mode.
fn linear_support(f: &FourierSeries, n: usize) -> Vec<(isize, usize)> {
    let side = (2 * n + 1) as isize;
    let b = f.block();
    let mut out = Vec::new();
    for (i, blk) in f.data.chunks(b).enumerate() {
        if blk.iter().all(|v| *v == ZERO) {
            continue;
        }
        let k = unflatten(i, f.dim, f.cutoff);
        let mut lin = 0isize;
        let mut stride = 1isize;
        for &v in &k {
            lin += v as isize * stride;
            stride *= side;
        }
        out.push((lin, i));
    }
    out
}

impl Add for &FourierSeries {
    type Output = FourierSeries;
    fn add(self, rhs: &FourierSeries) -> FourierSeries {
        self.try_add(rhs).expect("series shapes agree")
    }
}

impl Sub for &FourierSeries {
    type Output = FourierSeries;
    fn sub(self, rhs: &FourierSeries) -> FourierSeries {
        self.try_add(&rhs.scale_re(-1.0)).expect("series shapes agree")
    }
}

impl Neg for &FourierSeries {
    type Output = FourierSeries;
    fn neg(self) -> FourierSeries {
        self.scale_re(-1.0)
    }
}

impl Mul for &FourierSeries {
    type Output = FourierSeries;
    fn mul(self, rhs: &FourierSeries) -> FourierSeries {
        self.product(rhs).expect("series shapes compose")
    }
}

impl AddAssign<&FourierSeries> for FourierSeries {
    fn add_assign(&mut self, rhs: &FourierSeries) {
        if rhs.cutoff <= self.cutoff && self.shape() == rhs.shape() && self.dim == rhs.dim {
            let b = self.block();
            for (i, blk) in rhs.data.chunks(b).enumerate() {
                if blk.iter().all(|v| *v == ZERO) {
                    continue;
                }
                let k = unflatten(i, rhs.dim, rhs.cutoff);
                let j = flatten(&k, self.cutoff).unwrap();
                for (a, v) in self.data[j * b..(j + 1) * b].iter_mut().zip(blk) {
                    *a += v;
                }
            }
        } else {
            *self = &*self + rhs;
        }
    }
}

impl SubAssign<&FourierSeries> for FourierSeries {
    fn sub_assign(&mut self, rhs: &FourierSeries) {
        *self += &rhs.scale_re(-1.0);
    }
}
