//! Lattice operators `T = D + S` on `{1..n} × Λ`, right-hand sides of the
//! homological equations and their solvers.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::fourier::{cube, dot, norm_inf, FourierIndex, FourierSeries, C64, I, ONE, ZERO};
use crate::jet::{HamiltonianJet, Monomial};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HomologicalError {
    #[error("small divisor at k={k:?}: |divisor|={divisor:.3e} < floor {floor:.3e}")]
    SmallDivisor { k: FourierIndex, divisor: f64, floor: f64 },
    #[error("near-singular lattice operator: condition estimate {condition:.3e} exceeds cap {cap:.3e}")]
    NearSingular { condition: f64, cap: f64 },
    #[error("missing prerequisite component {0}")]
    MissingComponent(&'static str),
    #[error("shape error: {0}")]
    Shape(String),
}

/// Operator on `{1..block} × sites` with diagonal `shift_j + ⟨k,ω⟩ + σ` and
/// Toeplitz part `symbol_{jj'}(k − k')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeMatrix {
    block: usize,
    sites: Vec<FourierIndex>,
    omega: Vec<f64>,
    shifts: Vec<f64>,
    sigma: f64,
    symbol: FourierSeries,
    /// Diagonal entries overriding the generator, keyed by `(k, j)`.
    planted: BTreeMap<(FourierIndex, usize), f64>,
}

impl LatticeMatrix {
    pub fn new(sites: Vec<FourierIndex>, omega: Vec<f64>, shifts: Vec<f64>, symbol: FourierSeries) -> Self {
        let block = shifts.len();
        assert_eq!(symbol.shape(), (block, block), "symbol must be block × block");
        assert_eq!(symbol.dim(), omega.len());
        LatticeMatrix {
            block,
            sites,
            omega,
            shifts,
            sigma: 0.0,
            symbol,
            planted: BTreeMap::new(),
        }
    }

    /// Purely diagonal operator on the cube `[-n, n]^d`.
    pub fn diagonal(d: usize, n: usize, omega: Vec<f64>, shifts: Vec<f64>) -> Self {
        let b = shifts.len();
        Self::new(cube(d, n), omega, shifts, FourierSeries::zeros(d, 0, b, b))
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn sites(&self) -> &[FourierIndex] {
        &self.sites
    }

    pub fn size(&self) -> usize {
        self.block * self.sites.len()
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn shifts(&self) -> &[f64] {
        &self.shifts
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn symbol(&self) -> &FourierSeries {
        &self.symbol
    }

    pub fn with_sigma(&self, sigma: f64) -> Self {
        let mut t = self.clone();
        t.sigma = sigma;
        t
    }

    pub fn with_symbol(&self, symbol: FourierSeries) -> Self {
        assert_eq!(symbol.shape(), (self.block, self.block));
        let mut t = self.clone();
        t.symbol = symbol;
        t
    }

    pub fn plant_diagonal(&mut self, k: &[i32], j: usize, value: f64) {
        self.planted.insert((k.to_vec(), j), value);
    }

    pub fn diag_at(&self, k: &[i32], j: usize) -> f64 {
        if let Some(v) = self.planted.get(&(k.to_vec(), j)) {
            return *v;
        }
        self.shifts[j] + dot(k, &self.omega) + self.sigma
    }

    /// Row/column index `site * block + j`.
    pub fn entry(&self, row: usize, col: usize) -> C64 {
        let (sa, ja) = (row / self.block, row % self.block);
        let (sb, jb) = (col / self.block, col % self.block);
        let ka = &self.sites[sa];
        let kb = &self.sites[sb];
        let mut v = match self.symbol.coeff_diff(ka, kb) {
            Some(blk) => blk[ja * self.block + jb],
            None => ZERO,
        };
        if row == col {
            v += self.diag_at(ka, ja);
        }
        v
    }

    pub fn dense(&self) -> DMatrix<C64> {
        let m = self.size();
        let mut out = DMatrix::from_element(m, m, ZERO);
        let b = self.block;
        for (sa, ka) in self.sites.iter().enumerate() {
            for (sb, kb) in self.sites.iter().enumerate() {
                if let Some(blk) = self.symbol.coeff_diff(ka, kb) {
                    for ja in 0..b {
                        for jb in 0..b {
                            out[(sa * b + ja, sb * b + jb)] = blk[ja * b + jb];
                        }
                    }
                }
            }
            for ja in 0..b {
                out[(sa * b + ja, sa * b + ja)] += self.diag_at(ka, ja);
            }
        }
        out
    }

    /// Same generator and symbol on another site set.
    pub fn restrict(&self, sites: &[FourierIndex]) -> Self {
        let mut t = self.clone();
        t.sites = sites.to_vec();
        t
    }

    /// Sites translated by `p`.
    pub fn translate(&self, p: &[i32]) -> Self {
        let mut t = self.clone();
        t.sites = self
            .sites
            .iter()
            .map(|k| k.iter().zip(p).map(|(a, b)| a + b).collect())
            .collect();
        t
    }

    /// Smallest `c` with `|S(x,y)| ≤ c e^{−ρ|x−y|_∞}` for `x ≠ y`.
    pub fn decay_constant(&self, rho: f64) -> f64 {
        let mut c: f64 = 0.0;
        for (k, blk) in self.symbol.modes() {
            if k.iter().all(|&v| v == 0) {
                continue;
            }
            let m = blk.iter().map(|v| v.norm()).fold(0.0, f64::max);
            c = c.max(m * (rho * norm_inf(&k) as f64).exp());
        }
        c
    }

    /// Smallest absolute diagonal entry.
    pub fn min_abs_diag(&self) -> f64 {
        let mut m = f64::INFINITY;
        for k in &self.sites {
            for j in 0..self.block {
                m = m.min(self.diag_at(k, j).abs());
            }
        }
        m
    }
}

/// `D(j,k) = Ω_j + ⟨k,ω⟩` on `[-N,N]^d`, symbol `Qᵀ` with `Q = B + R^{zz̄}`.
///
/// `Q_{jk}` multiplies `z̄_j z_k`, so the bracket with `⟨F^z,z⟩` acts by the transpose.
pub fn build_t(omega: &[f64], big_omega: &[f64], b: &FourierSeries, rzz: &FourierSeries, n: usize) -> LatticeMatrix {
    let d = omega.len();
    LatticeMatrix::new(cube(d, n), omega.to_vec(), big_omega.to_vec(), (b + rzz).transpose())
}

/// Bold operator on pairs `(i,j)` (row-major): diagonal `Ω_i + Ω_j + ⟨k,ω⟩`,
/// symbol `Q_{i'i}δ_{jj'} + δ_{ii'}Q_{j'j}` with `Q = B + R^{zz̄}`, i.e. `F ↦ QᵀF + FQ`.
pub fn build_bold_t(
    omega: &[f64],
    big_omega: &[f64],
    b: &FourierSeries,
    rzz: &FourierSeries,
    n: usize,
) -> LatticeMatrix {
    let d = omega.len();
    let nb = big_omega.len();
    let m = b + rzz;
    let nn = nb * nb;
    let mut entries = vec![FourierSeries::scalar_zeros(d, 0); nn * nn];
    for i in 0..nb {
        for j in 0..nb {
            let row = i * nb + j;
            for ip in 0..nb {
                for jp in 0..nb {
                    let col = ip * nb + jp;
                    let mut s = FourierSeries::scalar_zeros(d, 0);
                    if j == jp {
                        s += &m.entry_series(ip, i);
                    }
                    if i == ip {
                        s += &m.entry_series(jp, j);
                    }
                    entries[row * nn + col] = s;
                }
            }
        }
    }
    let symbol = FourierSeries::from_entries(d, nn, nn, &entries);
    let shifts: Vec<f64> = (0..nb)
        .flat_map(|i| (0..nb).map(move |j| (i, j)))
        .map(|(i, j)| big_omega[i] + big_omega[j])
        .collect();
    LatticeMatrix::new(cube(d, n), omega.to_vec(), shifts, symbol)
}

/// Floor `γ·max(|k|_∞,1)^{−τ}` for small divisors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivisorFloor {
    pub gamma: f64,
    pub tau: f64,
}

impl DivisorFloor {
    pub fn constant(gamma: f64) -> Self {
        DivisorFloor { gamma, tau: 0.0 }
    }

    pub fn at(&self, k: &[i32]) -> f64 {
        self.gamma * (norm_inf(k).max(1) as f64).powf(-self.tau)
    }
}

fn check_divisors(omega: &[f64], n: usize, floor: &DivisorFloor) -> Result<(), HomologicalError> {
    for k in cube(omega.len(), n) {
        if k.iter().all(|&v| v == 0) {
            continue;
        }
        let dv = dot(&k, omega);
        let f = floor.at(&k);
        if dv.abs() < f {
            return Err(HomologicalError::SmallDivisor {
                k,
                divisor: dv.abs(),
                floor: f,
            });
        }
    }
    Ok(())
}

fn invert_by_mode(r: &FourierSeries, omega: &[f64], n: usize) -> FourierSeries {
    r.truncate(n).map_by_mode(|k| {
        if k.iter().all(|&v| v == 0) {
            ZERO
        } else {
            ONE / (I * dot(k, omega))
        }
    })
}

/// Output of [`solve_hx`].
#[derive(Debug, Clone)]
pub struct HxSolution {
    pub fx: FourierSeries,
    /// `R̂^x(0)`, dropped from the right-hand side.
    pub dropped_mean: C64,
}

/// `∂_ω F^x = Γ_N R^x` with the mean removed.
pub fn solve_hx(rx: &FourierSeries, omega: &[f64], n: usize, floor: &DivisorFloor) -> Result<HxSolution, HomologicalError> {
    if rx.shape() != (1, 1) {
        return Err(HomologicalError::Shape("R^x must be scalar".into()));
    }
    check_divisors(omega, n, floor)?;
    Ok(HxSolution {
        fx: invert_by_mode(rx, omega, n),
        dropped_mean: rx.mean()[0],
    })
}

/// `∂_ω F^y = Γ_N ℛ − ℛ̂(0)`; returns `(F^y, ℛ̂(0))`.
pub fn solve_hy(
    r: &FourierSeries,
    omega: &[f64],
    n: usize,
    floor: &DivisorFloor,
) -> Result<(FourierSeries, Vec<C64>), HomologicalError> {
    if r.shape() != (omega.len(), 1) {
        return Err(HomologicalError::Shape("ℛ must be a d-vector".into()));
    }
    check_divisors(omega, n, floor)?;
    Ok((invert_by_mode(r, omega, n), r.mean()))
}

/// Solve report shared by the lattice solvers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub condition: f64,
    pub residual: f64,
}

pub fn norm1(m: &DMatrix<C64>) -> f64 {
    (0..m.ncols())
        .map(|c| m.column(c).iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Dense inverse and the 1-norm condition number.
pub fn dense_inverse(m: &DMatrix<C64>) -> Option<(DMatrix<C64>, f64)> {
    let inv = m.clone().lu().try_inverse()?;
    if inv.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return None;
    }
    let cond = norm1(m) * norm1(&inv);
    Some((inv, cond))
}

/// Hager–Higham estimate of `‖A⁻¹‖₁` from an LU factorization. It is a lower
/// bound that is exact or within a small factor in practice.
fn inverse_norm1_estimate(lu: &nalgebra::LU<C64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let n = lu.l().nrows();
    if n == 0 {
        return 0.0;
    }
    let (l, u) = (lu.l(), lu.u());
    let solve_adjoint = |c: &DVector<C64>| -> Option<DVector<C64>> {
        let w = u.ad_solve_upper_triangular(c)?;
        let mut v = l.ad_solve_lower_triangular(&w)?;
        lu.p().inv_permute_rows(&mut v);
        Some(v)
    };
    let l1 = |v: &DVector<C64>| v.iter().map(|c| c.norm()).sum::<f64>();
    let mut x = DVector::from_element(n, C64::new(1.0 / n as f64, 0.0));
    let mut est = 0.0;
    for iter in 0..5 {
        let Some(y) = lu.solve(&x) else { return f64::INFINITY };
        let ny = l1(&y);
        if iter > 0 && ny <= est {
            break;
        }
        est = ny;
        let sign = y.map(|c| if c.norm() > 0.0 { c / c.norm() } else { ONE });
        let Some(z) = solve_adjoint(&sign) else { return f64::INFINITY };
        let (j, zj) = z.iter().enumerate().fold((0, 0.0), |acc, (i, c)| if c.norm() > acc.1 { (i, c.norm()) } else { acc });
        if iter > 0 && zj <= z.dotc(&x).re {
            break;
        }
        x = DVector::from_element(n, ZERO);
        x[j] = ONE;
    }
    // Alternating probe that catches the estimator's known blind spots.
    let denom = (n.max(2) - 1) as f64;
    let alt = DVector::from_fn(n, |i, _| {
        let s = if i % 2 == 0 { 1.0 } else { -1.0 };
        C64::new(s * (1.0 + i as f64 / denom), 0.0)
    });
    match lu.solve(&alt) {
        Some(y) => est.max(2.0 * l1(&y) / (3.0 * n as f64)),
        None => f64::INFINITY,
    }
}

/// Solves `T F̂ = −i R̂` for a block-vector or block-matrix series laid out along `T`'s blocks.
fn lattice_solve(
    t: &LatticeMatrix,
    rhs: &[C64],
    cond_cap: f64,
) -> Result<(Vec<C64>, SolveReport), HomologicalError> {
    let m = t.dense();
    let lu = m.clone().lu();
    let b = DVector::from_iterator(rhs.len(), rhs.iter().map(|v| -I * v));
    let singular = HomologicalError::NearSingular {
        condition: f64::INFINITY,
        cap: cond_cap,
    };
    let x = lu.solve(&b).ok_or(singular.clone())?;
    if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(singular);
    }
    let cond = norm1(&m) * inverse_norm1_estimate(&lu);
    if !(cond <= cond_cap) {
        return Err(HomologicalError::NearSingular {
            condition: cond,
            cap: cond_cap,
        });
    }
    let res = (&m * &x - &b).norm() / b.norm().max(1e-300);
    Ok((x.iter().copied().collect(), SolveReport { condition: cond, residual: res }))
}

fn lattice_cutoff(t: &LatticeMatrix) -> usize {
    t.sites().iter().map(|k| norm_inf(k) as usize).max().unwrap_or(0)
}

/// `T F̂ = −i Ê_N` for the `n`-vector `F^z`.
pub fn solve_hz(t: &LatticeMatrix, ehat: &FourierSeries, cond_cap: f64) -> Result<(FourierSeries, SolveReport), HomologicalError> {
    let nb = t.block();
    if ehat.shape() != (nb, 1) {
        return Err(HomologicalError::Shape(format!("Ê must be {nb}×1")));
    }
    let mut rhs = Vec::with_capacity(t.size());
    for k in t.sites() {
        for j in 0..nb {
            rhs.push(ehat.entry(k, j, 0));
        }
    }
    let (x, rep) = lattice_solve(t, &rhs, cond_cap)?;
    let mut f = FourierSeries::zeros(t.dim(), lattice_cutoff(t), nb, 1);
    for (s, k) in t.sites().iter().enumerate() {
        for j in 0..nb {
            f.set_entry(k, j, 0, x[s * nb + j]);
        }
    }
    Ok((f, rep))
}

/// Bold equation for `F^{zz}`; the result is symmetrized.
pub fn solve_hzz(bold_t: &LatticeMatrix, shat: &FourierSeries, cond_cap: f64) -> Result<(FourierSeries, SolveReport), HomologicalError> {
    let nn = bold_t.block();
    let nb = (nn as f64).sqrt().round() as usize;
    if nb * nb != nn || shat.shape() != (nb, nb) {
        return Err(HomologicalError::Shape(format!("Ŝ must be {nb}×{nb}")));
    }
    let mut rhs = Vec::with_capacity(bold_t.size());
    for k in bold_t.sites() {
        for i in 0..nb {
            for j in 0..nb {
                rhs.push(shat.entry(k, i, j));
            }
        }
    }
    let (x, rep) = lattice_solve(bold_t, &rhs, cond_cap)?;
    let mut f = FourierSeries::zeros(bold_t.dim(), lattice_cutoff(bold_t), nb, nb);
    for (s, k) in bold_t.sites().iter().enumerate() {
        for i in 0..nb {
            for j in 0..nb {
                f.set_entry(k, i, j, x[s * nn + i * nb + j]);
            }
        }
    }
    let sym = (&f + &f.transpose()).scale_re(0.5);
    Ok((sym, rep))
}

/// `F = F^x + ⟨F^y,y⟩ + ⟨F^z,z⟩ + ⟨F^z̄,z̄⟩ + ⟨F^{zz}z,z⟩ + ⟨F^{z̄z̄}z̄,z̄⟩` plus updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomologicalSolution {
    pub fx: FourierSeries,
    pub fy: FourierSeries,
    pub fz: FourierSeries,
    pub fzb: FourierSeries,
    pub fzz: FourierSeries,
    pub fzbzb: FourierSeries,
    pub freq_shift: Vec<f64>,
    pub b_update: FourierSeries,
}

impl HomologicalSolution {
    pub fn zero(d: usize, n: usize) -> Self {
        HomologicalSolution {
            fx: FourierSeries::scalar_zeros(d, 0),
            fy: FourierSeries::zeros(d, 0, d, 1),
            fz: FourierSeries::zeros(d, 0, n, 1),
            fzb: FourierSeries::zeros(d, 0, n, 1),
            fzz: FourierSeries::zeros(d, 0, n, n),
            fzbzb: FourierSeries::zeros(d, 0, n, n),
            freq_shift: vec![0.0; d],
            b_update: FourierSeries::zeros(d, 0, n, n),
        }
    }

    pub fn to_jet(&self, layout: &HamiltonianJet) -> HamiltonianJet {
        let (d, n) = (layout.d(), layout.n());
        let mut f = layout.empty_like();
        f.add_term(Monomial::one(d, n), &self.fx);
        for i in 0..d {
            f.add_term(Monomial::y(d, n, i), &self.fy.entry_series(i, 0));
        }
        for j in 0..n {
            f.add_term(Monomial::z(d, n, j), &self.fz.entry_series(j, 0));
            f.add_term(Monomial::zb(d, n, j), &self.fzb.entry_series(j, 0));
        }
        add_quadratic(&mut f, &self.fzz, false);
        add_quadratic(&mut f, &self.fzbzb, true);
        f.prune();
        f
    }

    /// Coefficientwise defect of `F^z̄ = conj(F^z)` and `F^{z̄z̄} = conj(F^{zz})`.
    pub fn conjugation_defect(&self) -> f64 {
        self.fzb
            .max_abs_diff(&self.fz.conj_function())
            .max(self.fzbzb.max_abs_diff(&self.fzz.conj_function()))
    }
}

/// Adds `⟨S w, w⟩` with `w = z` or `z̄`.
fn add_quadratic(f: &mut HamiltonianJet, s: &FourierSeries, bar: bool) {
    let (d, n) = (f.d(), f.n());
    for i in 0..n {
        for j in i..n {
            let c = if i == j {
                s.entry_series(i, i)
            } else {
                &s.entry_series(i, j) + &s.entry_series(j, i)
            };
            let m = if bar { Monomial::zbzb(d, n, i, j) } else { Monomial::zz(d, n, i, j) };
            f.add_term(m, &c);
        }
    }
}

/// Symmetric matrix `S` of the quadratic form `Σ_{i≤j} c_{ij} w_i w_j = ⟨S w, w⟩`.
pub fn quadratic_matrix(p: &HamiltonianJet, bar: bool) -> FourierSeries {
    let (d, n) = (p.d(), p.n());
    let mut entries = vec![FourierSeries::scalar_zeros(d, 0); n * n];
    for i in 0..n {
        for j in 0..n {
            let m = if bar {
                Monomial::zbzb(d, n, i.min(j), i.max(j))
            } else {
                Monomial::zz(d, n, i.min(j), i.max(j))
            };
            let c = p.coeff(&m);
            entries[i * n + j] = if i == j { c } else { c.scale_re(0.5) };
        }
    }
    FourierSeries::from_entries(d, n, n, &entries)
}

/// Derivative `∂_y^{ys} ∂_z^{zs} ∂_z̄^{zbs} P` at `y = z = z̄ = 0`.
pub fn derivative_at_zero(p: &HamiltonianJet, ys: &[usize], zs: &[usize], zbs: &[usize]) -> FourierSeries {
    let (d, n) = (p.d(), p.n());
    let mut m = Monomial::one(d, n);
    for &i in ys {
        m.y[i] += 1;
    }
    for &i in zs {
        m.z[i] += 1;
    }
    for &i in zbs {
        m.zb[i] += 1;
    }
    let f = m.factorial();
    p.coeff(&m).scale_re(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RhsStage {
    E,
    Ebar,
    R,
    S,
    Sbar,
}

/// Components already solved, as consumed by [`assemble_rhs`].
#[derive(Debug, Clone, Default)]
pub struct PartialF {
    pub fx: Option<FourierSeries>,
    pub fz: Option<FourierSeries>,
    pub fzb: Option<FourierSeries>,
}

fn need<'a>(v: &'a Option<FourierSeries>, name: &'static str) -> Result<&'a FourierSeries, HomologicalError> {
    v.as_ref().ok_or(HomologicalError::MissingComponent(name))
}

/// Right-hand sides `𝓔, 𝓔', ℛ, 𝒮, 𝒮'`. Derivatives of `P` are taken from its
/// weighted-degree ≥ 3 part; the `R^•` terms from its low part.
pub fn assemble_rhs(stage: RhsStage, p: &HamiltonianJet, f: &PartialF) -> Result<FourierSeries, HomologicalError> {
    let (d, n) = (p.d(), p.n());
    let split = p.split_low_high();
    let (low, high) = (&split.low, &split.high);
    let zero = || FourierSeries::scalar_zeros(d, 0);
    match stage {
        RhsStage::E | RhsStage::Ebar => {
            let fx = need(&f.fx, "F^x")?;
            let bar = stage == RhsStage::Ebar;
            let mut entries = Vec::with_capacity(n);
            for j in 0..n {
                let mono = if bar { Monomial::zb(d, n, j) } else { Monomial::z(d, n, j) };
                let mut e = low.coeff(&mono);
                for i in 0..d {
                    let pyz = if bar {
                        derivative_at_zero(high, &[i], &[], &[j])
                    } else {
                        derivative_at_zero(high, &[i], &[j], &[])
                    };
                    e -= &(&pyz * &fx.partial(i));
                }
                entries.push(e);
            }
            Ok(FourierSeries::from_entries(d, n, 1, &entries))
        }
        RhsStage::R => {
            let fx = need(&f.fx, "F^x")?;
            let fz = need(&f.fz, "F^z")?;
            let fzb = need(&f.fzb, "F^z̄")?;
            let mut entries = Vec::with_capacity(d);
            for i in 0..d {
                let mut r = low.coeff(&Monomial::y(d, n, i));
                for l in 0..d {
                    let pyy = derivative_at_zero(high, &[i, l], &[], &[]);
                    r -= &(&pyy * &fx.partial(l));
                }
                for j in 0..n {
                    let pyzb = derivative_at_zero(high, &[i], &[], &[j]);
                    let pyz = derivative_at_zero(high, &[i], &[j], &[]);
                    r -= &(&pyzb * &fz.entry_series(j, 0)).scale(I);
                    r += &(&pyz * &fzb.entry_series(j, 0)).scale(I);
                }
                entries.push(r);
            }
            Ok(FourierSeries::from_entries(d, d, 1, &entries))
        }
        RhsStage::S | RhsStage::Sbar => {
            let fx = need(&f.fx, "F^x")?;
            let fz = need(&f.fz, "F^z")?;
            let fzb = need(&f.fzb, "F^z̄")?;
            let bar = stage == RhsStage::Sbar;
            let r = quadratic_matrix(low, bar);
            let dfx: Vec<FourierSeries> = (0..d).map(|i| fx.partial(i)).collect();
            // Linear part feeding the cross term: F^z for 𝒮, F^z̄ for 𝒮'.
            let flin = if bar { fzb } else { fz };
            let mut a = vec![zero(); n * n];
            for j in 0..n {
                for k in 0..n {
                    let mut acc = zero();
                    for i in 0..d {
                        let pyw = if bar {
                            derivative_at_zero(high, &[i], &[], &[k])
                        } else {
                            derivative_at_zero(high, &[i], &[k], &[])
                        };
                        acc += &(&flin.entry_series(j, 0).partial(i) * &pyw);
                    }
                    a[j * n + k] = acc;
                }
            }
            let mut entries = Vec::with_capacity(n * n);
            for j in 0..n {
                for k in 0..n {
                    let mut br = zero();
                    for i in 0..d {
                        let pyww = if bar {
                            derivative_at_zero(high, &[i], &[], &[j, k])
                        } else {
                            derivative_at_zero(high, &[i], &[j, k], &[])
                        };
                        br += &(&dfx[i] * &pyww).scale_re(0.5);
                    }
                    br += &(&a[j * n + k] + &a[k * n + j]).scale_re(0.5);
                    for l in 0..n {
                        let (with_fz, with_fzb) = if bar {
                            (
                                derivative_at_zero(high, &[], &[], &[l, j, k]),
                                derivative_at_zero(high, &[], &[l], &[j, k]),
                            )
                        } else {
                            (
                                derivative_at_zero(high, &[], &[j, k], &[l]),
                                derivative_at_zero(high, &[], &[l, j, k], &[]),
                            )
                        };
                        br += &(&fz.entry_series(l, 0) * &with_fz).scale(I * 0.5);
                        br -= &(&fzb.entry_series(l, 0) * &with_fzb).scale(I * 0.5);
                    }
                    entries.push(&r.entry_series(j, k) - &br);
                }
            }
            Ok(FourierSeries::from_entries(d, n, n, &entries))
        }
    }
}

fn diag_const(d: usize, v: &[f64]) -> FourierSeries {
    let n = v.len();
    let mut e = vec![ZERO; n * n];
    for j in 0..n {
        e[j * n + j] = C64::new(v[j], 0.0);
    }
    FourierSeries::constant_matrix(d, n, n, &e)
}

fn relative(diff: f64, scale: f64) -> f64 {
    diff / scale.max(1e-300)
}

/// Relative residual of `∂_ω F^x = Γ_N (R^x − R̂^x(0))`.
pub fn residual_hx(rx: &FourierSeries, fx: &FourierSeries, omega: &[f64], n: usize) -> f64 {
    let mut rhs = rx.truncate(n);
    let d = omega.len();
    rhs.set_entry(&vec![0; d], 0, 0, ZERO);
    relative(fx.dir_derivative(omega).max_abs_diff(&rhs), rhs.max_abs().max(fx.max_abs()))
}

/// Relative residual of `∂_ω F^y = Γ_N ℛ − ℛ̂(0)`.
pub fn residual_hy(r: &FourierSeries, fy: &FourierSeries, omega: &[f64], n: usize) -> f64 {
    let mut rhs = r.truncate(n);
    let d = omega.len();
    for i in 0..d {
        rhs.set_entry(&vec![0; d], i, 0, ZERO);
    }
    relative(fy.dir_derivative(omega).max_abs_diff(&rhs), rhs.max_abs().max(fy.max_abs()))
}

/// Relative residual of `∂_ω F + sign·i Γ_N[AF] = Γ_N rhs` for a vector `F`,
/// `A = (Ω+Q)ᵀ` for `sign > 0` (the `z` equation) and `A = Ω+Q` otherwise.
pub fn residual_linear(
    omega: &[f64],
    big_omega: &[f64],
    m: &FourierSeries,
    f: &FourierSeries,
    rhs: &FourierSeries,
    n: usize,
    sign: f64,
) -> f64 {
    let d = omega.len();
    let mut op = &diag_const(d, big_omega) + m;
    if sign > 0.0 {
        op = op.transpose();
    }
    let lhs = &f.dir_derivative(omega) + &(&op * f).truncate(n).scale(I * sign);
    let r = rhs.truncate(n);
    relative(lhs.truncate(n).max_abs_diff(&r), r.max_abs().max(f.max_abs()))
}

/// Relative residual of `∂_ω F + sign·i Γ_N[AᵀF + FA] = Γ_N rhs` for a matrix `F`,
/// `A = Ω+Q` for `sign > 0` and `A = (Ω+Q)ᵀ` otherwise.
pub fn residual_quadratic(
    omega: &[f64],
    big_omega: &[f64],
    m: &FourierSeries,
    f: &FourierSeries,
    rhs: &FourierSeries,
    n: usize,
    sign: f64,
) -> f64 {
    let d = omega.len();
    let mut op = &diag_const(d, big_omega) + m;
    if sign < 0.0 {
        op = op.transpose();
    }
    let act = &(&op.transpose() * f) + &(f * &op);
    let lhs = &f.dir_derivative(omega) + &act.truncate(n).scale(I * sign);
    let r = rhs.truncate(n);
    relative(lhs.truncate(n).max_abs_diff(&r), r.max_abs().max(f.max_abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PHI: f64 = 1.618_033_988_749_895;

    fn rand_real_series(rng: &mut ChaCha8Rng, d: usize, n: usize, amp: f64) -> FourierSeries {
        let mut f = FourierSeries::scalar_zeros(d, n);
        for k in cube(d, n) {
            let v = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * amp;
            f.set_entry(&k, 0, 0, v);
        }
        (&f + &f.conj_function()).scale_re(0.5)
    }

    fn rand_sym_matrix(rng: &mut ChaCha8Rng, d: usize, nb: usize, n: usize, amp: f64) -> FourierSeries {
        let mut entries = vec![FourierSeries::scalar_zeros(d, 0); nb * nb];
        for i in 0..nb {
            for j in i..nb {
                let s = rand_real_series(rng, d, n, amp);
                entries[i * nb + j] = s.clone();
                entries[j * nb + i] = s;
            }
        }
        FourierSeries::from_entries(d, nb, nb, &entries)
    }

    fn rand_hermitian_matrix(rng: &mut ChaCha8Rng, d: usize, nb: usize, n: usize, amp: f64) -> FourierSeries {
        let mut entries = vec![FourierSeries::scalar_zeros(d, 0); nb * nb];
        for i in 0..nb {
            entries[i * nb + i] = rand_real_series(rng, d, n, amp);
            for j in i + 1..nb {
                let mut s = FourierSeries::scalar_zeros(d, n);
                for k in cube(d, n) {
                    s.set_entry(&k, 0, 0, C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * amp);
                }
                entries[j * nb + i] = s.conj_function();
                entries[i * nb + j] = s;
            }
        }
        FourierSeries::from_entries(d, nb, nb, &entries)
    }

    #[test]
    fn hermitian_symbol_keeps_conjugate_pairing() {
        let w = [1.0, PHI];
        let big = [0.577, 1.27];
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let q = rand_hermitian_matrix(&mut rng, 2, 2, 2, 0.03);
        assert!(q.symmetry_violation() > 1e-3);
        let zz = FourierSeries::zeros(2, 0, 2, 2);
        let t = build_t(&w, &big, &q, &zz, 3);
        let e = FourierSeries::from_entries(2, 2, 1, &[rand_real_series(&mut rng, 2, 3, 1.0), rand_real_series(&mut rng, 2, 3, 1.0)]);
        let (f, _) = solve_hz(&t, &e, 1e12).unwrap();
        assert!(residual_linear(&w, &big, &q, &f, &e, 3, 1.0) < 1e-10);
        assert!(residual_linear(&w, &big, &q, &f.conj_function(), &e.conj_function(), 3, -1.0) < 1e-10);
        // The untransposed operator is a different equation.
        assert!(residual_linear(&w, &big, &q.transpose(), &f, &e, 3, 1.0) > 1e-6);

        let bt = build_bold_t(&w, &big, &q, &zz, 2);
        let s2 = rand_sym_matrix(&mut rng, 2, 2, 2, 1.0);
        let (g, _) = solve_hzz(&bt, &s2, 1e12).unwrap();
        assert!(residual_quadratic(&w, &big, &q, &g, &s2, 2, 1.0) < 1e-10);
        assert!(residual_quadratic(&w, &big, &q, &g.conj_function(), &s2.conj_function(), 2, -1.0) < 1e-10);
    }

    #[test]
    fn unperturbed_t_is_diagonal() {
        let z = FourierSeries::zeros(2, 0, 1, 1);
        let t = build_t(&[1.0, PHI], &[1.0], &z, &z, 1);
        let m = t.dense();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if r != c {
                    assert_eq!(m[(r, c)], ZERO);
                }
            }
        }
        let idx = t.sites().iter().position(|k| k == &vec![1, 0]).unwrap();
        assert!((m[(idx, idx)].re - 2.0).abs() < 1e-15);
    }

    #[test]
    fn t_is_toeplitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = rand_sym_matrix(&mut rng, 2, 2, 3, 0.1);
        let z = FourierSeries::zeros(2, 0, 2, 2);
        let t = build_t(&[1.0, PHI], &[1.0, 2.0], &b, &z, 4);
        let pos = |k: &[i32]| t.sites().iter().position(|s| s == k).unwrap();
        for _ in 0..50 {
            let k: Vec<i32> = (0..2).map(|_| rng.random_range(-2..=2)).collect();
            let kp: Vec<i32> = (0..2).map(|_| rng.random_range(-2..=2)).collect();
            let p: Vec<i32> = (0..2).map(|_| rng.random_range(-2..=2)).collect();
            let kq: Vec<i32> = k.iter().zip(&p).map(|(a, b)| a + b).collect();
            let kpq: Vec<i32> = kp.iter().zip(&p).map(|(a, b)| a + b).collect();
            let (a, b2) = (pos(&k), pos(&kp));
            let (c, e) = (pos(&kq), pos(&kpq));
            if a != b2 {
                assert_eq!(t.entry(a * 2, b2 * 2 + 1), t.entry(c * 2, e * 2 + 1));
            }
        }
    }

    #[test]
    fn bold_table_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = rand_sym_matrix(&mut rng, 1, 2, 1, 0.3);
        let z = FourierSeries::zeros(1, 0, 2, 2);
        let bt = build_bold_t(&[PHI], &[1.0, 1.5], &b, &z, 1);
        let s = bt.symbol();
        // (i,j)=(1,1) → row 0; (2,1) → row 2 (row-major, zero-based).
        assert!(s.entry_series(0, 2).max_abs_diff(&b.entry_series(0, 1)) < 1e-15);
        let diag = &b.entry_series(0, 0) + &b.entry_series(1, 1);
        assert!(s.entry_series(1, 1).max_abs_diff(&diag) < 1e-15);
        let n1 = build_bold_t(&[PHI], &[1.0], &FourierSeries::zeros(1, 0, 1, 1), &FourierSeries::zeros(1, 0, 1, 1), 2);
        for (i, k) in n1.sites().iter().enumerate() {
            assert!((n1.entry(i, i).re - (2.0 + k[0] as f64 * PHI)).abs() < 1e-15);
        }
    }

    #[test]
    fn hx_examples() {
        let w = [1.0, PHI];
        let floor = DivisorFloor { gamma: 1e-3, tau: 3.0 };
        let rx = FourierSeries::cos_mode(2, &[1, 0], 1.0);
        let s = solve_hx(&rx, &w, 4, &floor).unwrap();
        assert!(s.fx.max_abs_diff(&FourierSeries::sin_mode(2, &[1, 0], 1.0)) < 1e-15);
        let with_mean = &rx + &FourierSeries::constant(2, C64::new(0.7, 0.0));
        let s2 = solve_hx(&with_mean, &w, 4, &floor).unwrap();
        assert!((s2.dropped_mean.re - 0.7).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = rand_real_series(&mut rng, 2, 5, 1.0);
        let s3 = solve_hx(&r, &w, 5, &floor).unwrap();
        assert!(residual_hx(&r, &s3.fx, &w, 5) < 1e-12);
        let bad = solve_hx(&r, &[1.0, 1.0], 5, &floor);
        assert!(matches!(bad, Err(HomologicalError::SmallDivisor { .. })));
    }

    #[test]
    fn hy_examples() {
        let w = [1.0, PHI];
        let floor = DivisorFloor { gamma: 1e-3, tau: 3.0 };
        let c = FourierSeries::constant_matrix(2, 2, 1, &[C64::new(0.3, 0.0), C64::new(-0.1, 0.0)]);
        let (fy, shift) = solve_hy(&c, &w, 3, &floor).unwrap();
        assert!(fy.is_zero());
        assert!((shift[0].re - 0.3).abs() < 1e-16 && (shift[1].re + 0.1).abs() < 1e-16);
        let r = FourierSeries::from_entries(2, 2, 1, &[FourierSeries::cos_mode(2, &[1, 0], 1.0), FourierSeries::scalar_zeros(2, 0)]);
        let (fy, shift) = solve_hy(&r, &w, 3, &floor).unwrap();
        assert!(fy.entry_series(0, 0).max_abs_diff(&FourierSeries::sin_mode(2, &[1, 0], 1.0)) < 1e-15);
        assert!(shift.iter().all(|v| v.norm() == 0.0));
        assert!(residual_hy(&r, &fy, &w, 3) < 1e-12);
    }

    #[test]
    fn hz_diagonal_and_dense_oracle() {
        let w = [1.0, PHI];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let e0 = rand_real_series(&mut rng, 2, 3, 1.0);
        let ehat = FourierSeries::from_entries(2, 1, 1, std::slice::from_ref(&e0));
        let z = FourierSeries::zeros(2, 0, 1, 1);
        let t = build_t(&w, &[0.577], &z, &z, 3);
        let (f, rep) = solve_hz(&t, &ehat, 1e12).unwrap();
        for k in cube(2, 3) {
            let expect = -I * e0.get(&k) / (0.577 + dot(&k, &w));
            assert!((f.get(&k) - expect).norm() < 1e-13);
        }
        assert!(rep.residual < 1e-12);
        let (f0, _) = solve_hz(&t, &FourierSeries::zeros(2, 0, 1, 1), 1e12).unwrap();
        assert!(f0.is_zero());

        let b = rand_sym_matrix(&mut rng, 2, 2, 2, 0.02);
        let zz = FourierSeries::zeros(2, 0, 2, 2);
        let t2 = build_t(&w, &[0.577, 1.27], &b, &zz, 3);
        let e2 = FourierSeries::from_entries(2, 2, 1, &[rand_real_series(&mut rng, 2, 3, 1.0), rand_real_series(&mut rng, 2, 3, 1.0)]);
        let (f2, _) = solve_hz(&t2, &e2, 1e12).unwrap();
        // Dense oracle: full LU solve of the same system.
        let m = t2.dense();
        let rhs: Vec<C64> = t2.sites().iter().flat_map(|k| (0..2).map(|j| -I * e2.entry(k, j, 0)).collect::<Vec<_>>()).collect();
        let x = m.lu().solve(&DVector::from_vec(rhs)).unwrap();
        for (s, k) in t2.sites().iter().enumerate() {
            for j in 0..2 {
                assert!((x[s * 2 + j] - f2.entry(k, j, 0)).norm() < 1e-10);
            }
        }
        assert!(residual_linear(&w, &[0.577, 1.27], &b, &f2, &e2, 3, 1.0) < 1e-10);
        let conj_rhs = e2.conj_function();
        assert!(residual_linear(&w, &[0.577, 1.27], &b, &f2.conj_function(), &conj_rhs, 3, -1.0) < 1e-10);
    }

    #[test]
    fn hzz_diagonal_and_n1() {
        let w = [1.0, PHI];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s0 = rand_real_series(&mut rng, 2, 2, 1.0);
        let shat = FourierSeries::from_entries(2, 1, 1, std::slice::from_ref(&s0));
        let z = FourierSeries::zeros(2, 0, 1, 1);
        let bt = build_bold_t(&w, &[0.577], &z, &z, 2);
        let (f, _) = solve_hzz(&bt, &shat, 1e12).unwrap();
        for k in cube(2, 2) {
            let expect = -I * s0.get(&k) / (1.154 + dot(&k, &w));
            assert!((f.get(&k) - expect).norm() < 1e-13);
        }
        let b = rand_sym_matrix(&mut rng, 2, 2, 2, 0.02);
        let zz = FourierSeries::zeros(2, 0, 2, 2);
        let bt2 = build_bold_t(&w, &[0.577, 0.83], &b, &zz, 2);
        let s2 = rand_sym_matrix(&mut rng, 2, 2, 2, 1.0);
        let (f2, _) = solve_hzz(&bt2, &s2, 1e12).unwrap();
        assert!(residual_quadratic(&w, &[0.577, 0.83], &b, &f2, &s2, 2, 1.0) < 1e-10);
        assert!(f2.symmetry_violation() < 1e-14);
    }

    #[test]
    fn bold_divisors_positive_below_melnikov_window() {
        // |⟨k,ω⟩| < min(Ω_i+Ω_j) on the scanned box: the bold diagonal stays positive.
        let w = [0.05, 0.031];
        let bt = build_bold_t(&w, &[1.0, 1.4], &FourierSeries::zeros(2, 0, 2, 2), &FourierSeries::zeros(2, 0, 2, 2), 5);
        assert!(bt.min_abs_diag() > 0.0);
        let floor = (0..bt.size()).map(|i| bt.entry(i, i).re).fold(f64::INFINITY, f64::min);
        assert!(floor > 0.0);
    }

    fn random_jet(rng: &mut ChaCha8Rng, d: usize, n: usize) -> HamiltonianJet {
        let mut p = HamiltonianJet::new(d, n, 4, 8, (0.3, 0.5));
        let mut monos = Vec::new();
        let all = |deg_cap: u32| {
            let mut v = Vec::new();
            let rng_y = 0..=2u8;
            for a0 in rng_y.clone() {
                for a1 in rng_y.clone() {
                    for b0 in 0..=3u8 {
                        for b1 in 0..=3u8 {
                            for c0 in 0..=3u8 {
                                for c1 in 0..=3u8 {
                                    let mut m = Monomial::one(d, n);
                                    m.y[0] = a0;
                                    if d > 1 {
                                        m.y[1] = a1;
                                    } else if a1 > 0 {
                                        continue;
                                    }
                                    m.z[0] = b0;
                                    m.zb[0] = c0;
                                    if n > 1 {
                                        m.z[1] = b1;
                                        m.zb[1] = c1;
                                    } else if b1 > 0 || c1 > 0 {
                                        continue;
                                    }
                                    if m.weighted_degree() <= deg_cap {
                                        v.push(m);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            v
        };
        monos.extend(all(4));
        for m in monos {
            p.add_term(m, &rand_real_series(rng, d, 2, 0.3));
        }
        p.realify()
    }

    #[test]
    fn rhs_matches_bracket_assembly() {
        // Independent assembly: R^• − [{F_1, P^high}]^• with F_1 = F^x + ⟨F^z,z⟩ + ⟨F^z̄,z̄⟩.
        for (seed, n) in [(31u64, 1usize), (32, 2)] {
            let d = 2;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_jet(&mut rng, d, n);
            let fx = rand_real_series(&mut rng, d, 2, 0.5);
            let fz_entries: Vec<FourierSeries> = (0..n).map(|_| rand_real_series(&mut rng, d, 2, 0.5)).collect();
            let fz = FourierSeries::from_entries(d, n, 1, &fz_entries);
            let fzb = fz.conj_function();
            let partial = PartialF {
                fx: Some(fx.clone()),
                fz: Some(fz.clone()),
                fzb: Some(fzb.clone()),
            };
            let mut sol = HomologicalSolution::zero(d, n);
            sol.fx = fx;
            sol.fz = fz;
            sol.fzb = fzb;
            let big = HamiltonianJet::new(d, n, 4, 40, (0.3, 0.5));
            let f1 = sol.to_jet(&big);
            let mut hi = big.empty_like();
            for (m, c) in p.split_low_high().high.terms() {
                hi.add_term(m.clone(), c);
            }
            let br = f1.poisson_bracket(&hi).unwrap();
            let lowp = p.split_low_high().low;
            let e = assemble_rhs(RhsStage::E, &p, &partial).unwrap();
            let eb = assemble_rhs(RhsStage::Ebar, &p, &partial).unwrap();
            for j in 0..n {
                let want = &lowp.coeff(&Monomial::z(d, n, j)) - &br.coeff(&Monomial::z(d, n, j));
                assert!(e.entry_series(j, 0).max_abs_diff(&want) < 1e-14);
                let want = &lowp.coeff(&Monomial::zb(d, n, j)) - &br.coeff(&Monomial::zb(d, n, j));
                assert!(eb.entry_series(j, 0).max_abs_diff(&want) < 1e-14);
            }
            let r = assemble_rhs(RhsStage::R, &p, &partial).unwrap();
            for i in 0..d {
                let want = &lowp.coeff(&Monomial::y(d, n, i)) - &br.coeff(&Monomial::y(d, n, i));
                assert!(r.entry_series(i, 0).max_abs_diff(&want) < 1e-14);
            }
            for bar in [false, true] {
                let stage = if bar { RhsStage::Sbar } else { RhsStage::S };
                let s = assemble_rhs(stage, &p, &partial).unwrap();
                let want = &quadratic_matrix(&lowp, bar) - &quadratic_matrix(&br, bar);
                assert!(s.max_abs_diff(&want) < 1e-14, "stage {stage:?} n={n}");
            }
        }
    }

    #[test]
    fn rhs_trivial_cases() {
        let d = 2;
        let n = 1;
        let mut p = HamiltonianJet::new(d, n, 4, 6, (0.3, 0.5));
        let rz = FourierSeries::cos_mode(2, &[1, 1], 0.2);
        p.add_term(Monomial::z(d, n, 0), &rz);
        let ry = FourierSeries::cos_mode(2, &[0, 1], 0.1);
        p.add_term(Monomial::y(d, n, 0), &ry);
        let partial = PartialF {
            fx: Some(FourierSeries::sin_mode(2, &[1, 0], 1.0)),
            fz: Some(FourierSeries::zeros(2, 0, 1, 1)),
            fzb: Some(FourierSeries::zeros(2, 0, 1, 1)),
        };
        let e = assemble_rhs(RhsStage::E, &p, &partial).unwrap();
        assert!(e.entry_series(0, 0).max_abs_diff(&rz) < 1e-16);
        let r = assemble_rhs(RhsStage::R, &p, &partial).unwrap();
        assert!(r.entry_series(0, 0).max_abs_diff(&ry) < 1e-16);
        let missing = assemble_rhs(RhsStage::R, &p, &PartialF::default());
        assert!(matches!(missing, Err(HomologicalError::MissingComponent(_))));
    }

    #[test]
    fn condition_estimate_tracks_exact_inverse_norm() {
        let n = 40;
        for seed in 0..5u64 {
            let m = DMatrix::from_fn(n, n, |i, j| {
                let h = ((i * 31 + j * 17 + seed as usize * 13) % 23) as f64 / 23.0 - 0.5;
                if i == j { C64::new(0.05 + 0.1 * h, 0.02 * seed as f64) } else { C64::new(0.1 * h, -0.03 * h) }
            });
            let exact = norm1(&m.clone().lu().try_inverse().unwrap());
            let est = inverse_norm1_estimate(&m.clone().lu());
            assert!(est <= exact * (1.0 + 1e-9) && est >= exact / 3.0, "seed {seed}: {est} vs {exact}");
        }
    }
}
