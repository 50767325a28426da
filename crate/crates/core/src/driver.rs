//! The KAM iteration: constant schedule, initial exclusion, one Newton-type step
//! per level, and extraction of the torus.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{
    diophantine_ok, melnikov1_ok, pave_and_filter, random_point, AtlasError, ExclusionRule, FrequencyMap,
    ParameterAtlas,
};
use crate::fourier::{FourierSeries, C64};
use crate::greens::{
    check_soundness, invert_direct, neumann_transfer, variation_delta, DecayCertificate, DirectOptions, GreensError,
    NeumannOptions, Perturbation,
};
use crate::homological::{
    assemble_rhs, build_bold_t, build_t, residual_hx, residual_hy, residual_linear, residual_quadratic, solve_hx,
    solve_hy, solve_hz, solve_hzz, DivisorFloor, HomologicalError, HomologicalSolution, LatticeMatrix, PartialF,
    RhsStage,
};
use crate::jet::{HamiltonianJet, JetError, Monomial, NormalForm};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DriverError {
    #[error("constant ordering violated: {}", .0.join("; "))]
    Ordering(Vec<String>),
    #[error("bad schedule input: {0}")]
    Schedule(String),
    #[error("parameter {xi:?} excluded: {reason}")]
    Excluded { xi: Vec<f64>, reason: String },
    #[error("every parameter box was excluded")]
    EmptyAtlas,
    #[error("perturbation violates the reality condition (defect {0:.3e})")]
    NotReal(f64),
    #[error("level {level}: {what} = {value:.3e} exceeds {bound:.3e}")]
    Assertion {
        level: u32,
        what: String,
        value: f64,
        bound: f64,
    },
    #[error(transparent)]
    Homological(#[from] HomologicalError),
    #[error(transparent)]
    Jet(#[from] JetError),
    #[error(transparent)]
    Atlas(#[from] AtlasError),
    #[error(transparent)]
    Greens(#[from] GreensError),
}

impl DriverError {
    /// True when the failure means the active parameter sits too close to a resonance.
    pub fn is_exclusion(&self) -> bool {
        matches!(
            self,
            DriverError::Excluded { .. }
                | DriverError::EmptyAtlas
                | DriverError::Homological(HomologicalError::SmallDivisor { .. })
                | DriverError::Homological(HomologicalError::NearSingular { .. })
        )
    }
}

/// Defaults `C₀..C₈`.
pub const DEFAULT_CONSTANTS: [f64; 9] = [2.0, 3.0, 17.0, 4.0, 5.0, 14.0, 11.0, 16.0, 12.0];

/// Named strict inequalities between the constants; empty when all hold.
pub fn constant_violations(c: &[f64; 9]) -> Vec<String> {
    let mut v = Vec::new();
    let mut need = |ok: bool, what: &str| {
        if !ok {
            v.push(what.to_string());
        }
    };
    need(c[1] > c[0], "C1 > C0");
    need(c[2] > 2.0 * c[1] + 10.0, "C2 > 2*C1 + 10");
    need(c[4] > c[3], "C4 > C3");
    need(c[3] > c[1], "C3 > C1");
    need(c[5] > c[6] + 2.0, "C5 > C6 + 2");
    need(c[6] > 2.0 * c[4], "C6 > 2*C4");
    need(c[7] > (c[4] + 10.0).max(c[5]), "C7 > max(C4 + 10, C5)");
    if c.iter().any(|x| !x.is_finite() || *x <= 0.0) {
        v.push("all constants positive and finite".into());
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub a: f64,
    pub constants: [f64; 9],
    pub s0: f64,
    pub r0: f64,
    /// Diophantine exponent; `d + 2` when absent.
    pub tau: Option<f64>,
    pub eps: f64,
    pub d: usize,
    pub n_max: usize,
}

impl ScheduleConfig {
    pub fn new(d: usize, eps: f64) -> Self {
        ScheduleConfig {
            a: 10.0,
            constants: DEFAULT_CONSTANTS,
            s0: 0.6,
            r0: 0.5,
            tau: None,
            eps,
            d,
            n_max: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamSchedule {
    pub a: f64,
    pub constants: [f64; 9],
    pub tau: f64,
    pub l_star: u32,
    pub s0: f64,
    pub r0: f64,
    pub eps: f64,
    pub n_max: usize,
}

pub fn make_schedule(cfg: &ScheduleConfig) -> Result<KamSchedule, DriverError> {
    let v = constant_violations(&cfg.constants);
    if !v.is_empty() {
        return Err(DriverError::Ordering(v));
    }
    let bad = |w: &str| Err(DriverError::Schedule(w.into()));
    if !(cfg.a > 1.0 && cfg.a.is_finite()) {
        return bad("A must exceed 1");
    }
    if !(cfg.s0 > 0.0 && cfg.r0 > 0.0) {
        return bad("s0 and r0 must be positive");
    }
    if !(cfg.eps > 0.0 && cfg.eps < 1.0) {
        return bad("eps must lie in (0, 1)");
    }
    if cfg.n_max == 0 {
        return bad("N_max must be positive");
    }
    let tau = cfg.tau.unwrap_or(cfg.d as f64 + 2.0);
    if !(tau > 0.0) {
        return bad("tau must be positive");
    }
    // A^{τ l*} = ε^{−1/3}, rounded up.
    let l_star = ((-cfg.eps.ln() / 3.0) / (tau * cfg.a.ln())).ceil().max(1.0) as u32;
    Ok(KamSchedule {
        a: cfg.a,
        constants: cfg.constants,
        tau,
        l_star,
        s0: cfg.s0,
        r0: cfg.r0,
        eps: cfg.eps,
        n_max: cfg.n_max,
    })
}

impl KamSchedule {
    pub fn eps_at(&self, l: u32) -> f64 {
        self.a.powf(-(4.0f64 / 3.0).powi(l as i32))
    }

    /// `Σ_{k≤l} k^{−2} / (2 Σ_k k^{−2})`, increasing to `1/2`.
    pub fn e_at(&self, l: u32) -> f64 {
        let partial: f64 = (1..=l as u64).map(|k| 1.0 / (k as f64 * k as f64)).sum();
        partial / (2.0 * PI * PI / 6.0)
    }

    pub fn s_at(&self, l: u32) -> f64 {
        self.s0 * (1.0 - self.e_at(l))
    }

    pub fn r_at(&self, l: u32) -> f64 {
        self.r0 * (1.0 - self.e_at(l))
    }

    /// Intermediate points `s_l^{(j)}, r_l^{(j)}`, `j = 0..=100`.
    pub fn intermediate(&self, l: u32, j: u32) -> (f64, f64) {
        let t = j.min(100) as f64 / 100.0;
        (
            (1.0 - t) * self.s_at(l) + t * self.s_at(l + 1),
            (1.0 - t) * self.r_at(l) + t * self.r_at(l + 1),
        )
    }

    /// `A^{l+1}` as a real (it overflows integers quickly).
    pub fn n_schedule(&self, l: u32) -> f64 {
        self.a.powi(l as i32 + 1)
    }

    pub fn n_cap(&self, l: u32) -> usize {
        let s = self.n_schedule(l);
        if s >= self.n_max as f64 {
            self.n_max
        } else {
            s.floor().max(1.0) as usize
        }
    }

    /// `(M₀, ln K, l₀, l₁)` for truncation `N`: `M₀ = (ln N)^{C₀}`,
    /// `ln K = (ln M₀)^{C₇}`, `l₀ = C₈ ln M₀`, `K = A^{l₁}`.
    pub fn multiscale_sizes(&self, n: f64) -> (f64, f64, f64, f64) {
        let c = &self.constants;
        let m0 = n.ln().max(0.0).powf(c[0]);
        let lm = m0.ln().max(0.0);
        let ln_k = lm.powf(c[7]);
        (m0, ln_k, c[8] * lm, ln_k / self.a.ln())
    }

    pub fn exclusion_rule(&self) -> ExclusionRule {
        let n = self.a.powi(self.l_star as i32).round() as usize;
        ExclusionRule::initial(self.eps, self.l_star, n, self.tau)
    }

    pub fn divisor_floor(&self) -> DivisorFloor {
        DivisorFloor {
            gamma: self.eps.sqrt(),
            tau: self.tau,
        }
    }
}

/// Iteration state at level `l`: `H = ⟨ω,y⟩ + ⟨(Ω+B)z,z̄⟩ + P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamState {
    pub level: u32,
    pub omega: Vec<f64>,
    pub big_omega: Vec<f64>,
    pub b: FourierSeries,
    pub p: HamiltonianJet,
    pub xi: Vec<f64>,
    pub eps_low: f64,
    pub eps_high: f64,
}

impl KamState {
    pub fn normal_form(&self) -> NormalForm {
        NormalForm {
            omega: self.omega.clone(),
            big_omega: self.big_omega.clone(),
            b: self.b.clone(),
        }
    }

    /// The full Hamiltonian as a jet.
    pub fn hamiltonian(&self) -> Result<HamiltonianJet, DriverError> {
        Ok(self.normal_form().to_jet(&self.p).add(&self.p)?)
    }

    /// `T = D + S` at truncation `n`, with symbol from `B + R^{zz̄}`.
    pub fn lattice_operator(&self, n: usize) -> LatticeMatrix {
        let rzz = self.p.split_low_high().low.zzb_matrix();
        build_t(&self.omega, &self.big_omega, &self.b, &rzz, n)
    }
}

/// `|T'(x,y) − T(x,y)| e^{ρ|x−y|}` between the operators of two states on `[−n,n]^d`.
pub fn state_variation(a: &KamState, b: &KamState, n: usize, rho: f64) -> Perturbation {
    variation_delta(&a.lattice_operator(n), &b.lattice_operator(n), rho)
}

/// Relative residuals of the six homological equations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HomologicalResiduals {
    pub hx: f64,
    pub hz: f64,
    pub hzb: f64,
    pub hy: f64,
    pub hzz: f64,
    pub hzbzb: f64,
}

impl HomologicalResiduals {
    pub fn max(&self) -> f64 {
        [self.hx, self.hz, self.hzb, self.hy, self.hzz, self.hzbzb]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Solves all homological equations for `P` around `nf` at truncation `n`.
///
/// `F^z̄` and `F^{z̄z̄}` are the conjugates of `F^z` and `F^{zz}`; their own
/// equations are still checked in the returned residuals.
pub fn solve_homological(
    nf: &NormalForm,
    p: &HamiltonianJet,
    n: usize,
    floor: &DivisorFloor,
    cond_cap: f64,
) -> Result<(HomologicalSolution, HomologicalResiduals), DriverError> {
    let (d, nb) = (p.d(), p.n());
    let (w, big) = (&nf.omega[..], &nf.big_omega[..]);
    let low = p.split_low_high().low;
    let rx = low.coeff(&Monomial::one(d, nb));
    let hx = solve_hx(&rx, w, n, floor)?;
    let mut partial = PartialF {
        fx: Some(hx.fx.clone()),
        ..Default::default()
    };
    let rzz = low.zzb_matrix();
    let q = &nf.b + &rzz;
    let (fz, fzb, e, ebar) = if nb > 0 {
        let e = assemble_rhs(RhsStage::E, p, &partial)?;
        let ebar = assemble_rhs(RhsStage::Ebar, p, &partial)?;
        let t = build_t(w, big, &nf.b, &rzz, n);
        let (fz, _) = solve_hz(&t, &e, cond_cap)?;
        let fzb = fz.conj_function();
        (fz, fzb, Some(e), Some(ebar))
    } else {
        (FourierSeries::zeros(d, 0, 0, 1), FourierSeries::zeros(d, 0, 0, 1), None, None)
    };
    partial.fz = Some(fz.clone());
    partial.fzb = Some(fzb.clone());
    let r = assemble_rhs(RhsStage::R, p, &partial)?;
    let (fy, mean) = solve_hy(&r, w, n, floor)?;
    let mut res = HomologicalResiduals {
        hx: residual_hx(&rx, &hx.fx, w, n),
        hy: residual_hy(&r, &fy, w, n),
        ..Default::default()
    };
    let (fzz, fzbzb) = if nb > 0 {
        let s = assemble_rhs(RhsStage::S, p, &partial)?;
        let sbar = assemble_rhs(RhsStage::Sbar, p, &partial)?;
        let bt = build_bold_t(w, big, &nf.b, &rzz, n);
        let (fzz, _) = solve_hzz(&bt, &s, cond_cap)?;
        let fzbzb = fzz.conj_function();
        let (e, ebar) = (e.unwrap(), ebar.unwrap());
        res.hz = residual_linear(w, big, &q, &fz, &e, n, 1.0);
        res.hzb = residual_linear(w, big, &q, &fzb, &ebar, n, -1.0);
        res.hzz = residual_quadratic(w, big, &q, &fzz, &s, n, 1.0);
        res.hzbzb = residual_quadratic(w, big, &q, &fzbzb, &sbar, n, -1.0);
        (fzz, fzbzb)
    } else {
        (FourierSeries::zeros(d, 0, 0, 0), FourierSeries::zeros(d, 0, 0, 0))
    };
    let sol = HomologicalSolution {
        fx: hx.fx,
        fy,
        fz,
        fzb,
        fzz,
        fzbzb,
        freq_shift: mean.iter().map(|c| c.re).collect(),
        b_update: FourierSeries::zeros(d, 0, nb, nb),
    };
    Ok((sol, res))
}

/// `vf_norm` at `(s, r)` of the modes of `low` with `|k|_∞ > n`.
pub fn truncation_tail(low: &HamiltonianJet, n: usize, s: f64, r: f64) -> f64 {
    let mut t = low.map_coefficients(|f| f.tail(n));
    t.add_remainder(-t.remainder());
    t.vf_norm(s, r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    /// Truncation is the smallest `N` whose tail is at most `tail_fraction · ε^{contraction}`.
    pub contraction: f64,
    pub tail_fraction: f64,
    pub lie_order: usize,
    pub cond_cap: f64,
    /// Hard failures instead of warnings for the level invariants.
    pub strict: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            contraction: 4.0 / 3.0,
            tail_fraction: 1.0,
            lie_order: 4,
            cond_cap: 1e12,
            strict: true,
        }
    }
}

/// Smallest admissible truncation `N ≤ cap` with tail below `target`; `(N, tail, capped)`.
pub fn choose_truncation(low: &HamiltonianJet, target: f64, s: f64, r: f64, cap: usize) -> (usize, f64, bool) {
    for n in 1..=cap {
        let t = truncation_tail(low, n, s, r);
        if t <= target {
            return (n, t, false);
        }
    }
    (cap, truncation_tail(low, cap, s, r), true)
}

/// Diagnostics of one accepted step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub level: u32,
    pub truncation: usize,
    pub truncation_capped: bool,
    pub tail: f64,
    pub eps_before: f64,
    pub eps_after: f64,
    pub eps_schedule: f64,
    pub contraction_exponent: f64,
    pub omega_shift: f64,
    pub b_drift: f64,
    pub b_symmetry_error: f64,
    pub reality_defect: f64,
    pub residuals: HomologicalResiduals,
    pub lie_terms: Vec<f64>,
    pub warnings: Vec<String>,
}

fn check(
    strict: bool,
    warnings: &mut Vec<String>,
    level: u32,
    what: &str,
    value: f64,
    bound: f64,
) -> Result<(), DriverError> {
    if value <= bound {
        return Ok(());
    }
    let e = DriverError::Assertion {
        level,
        what: what.into(),
        value,
        bound,
    };
    if strict {
        Err(e)
    } else {
        warnings.push(e.to_string());
        Ok(())
    }
}

/// One KAM step from level `l` to `l + 1`.
pub fn kam_step(
    state: KamState,
    sched: &KamSchedule,
    opts: &StepOptions,
) -> Result<(KamState, HomologicalSolution, StepRecord), DriverError> {
    let l = state.level;
    let (s1, r1) = (sched.s_at(l + 1), sched.r_at(l + 1));
    let split = state.p.split_low_high();
    let eps = state.eps_low;
    let target = opts.tail_fraction * eps.powf(opts.contraction);
    let (n, tail, capped) = choose_truncation(&split.low, target, s1, r1, sched.n_cap(l));
    let mut warnings = Vec::new();
    if capped {
        warnings.push(format!("level {l}: truncation capped at N = {n}, tail {tail:.3e} > {target:.3e}"));
    }

    let nf = state.normal_form();
    let (mut sol, residuals) = solve_homological(&nf, &state.p, n, &sched.divisor_floor(), opts.cond_cap)?;
    let f = sol.to_jet(&state.p);
    let e_jet = nf.to_jet(&state.p);
    let h = e_jet.add(&state.p)?;
    let lie = h.lie_increment(&f, opts.lie_order)?;

    // B_+ = B + R^{zz̄} + {E + ⟨R^{zz̄}z,z̄⟩ + P^{high}, F}^{zz̄}
    let rzz = split.low.zzb_matrix();
    let driver = e_jet.add(&split.low.zzb_part())?.add(&split.high)?;
    let b_update = &rzz + &driver.poisson_bracket(&f)?.zzb_matrix();
    let b_next = &state.b + &b_update;

    // P_+ = P + (H∘Φ − H) − ⟨ℛ̂(0), y⟩ − ⟨(B_+ − B)z, z̄⟩
    let (d, nb) = (state.p.d(), state.p.n());
    let mut p_next = state.p.add(&lie.jet)?;
    for (i, &w) in sol.freq_shift.iter().enumerate() {
        p_next.add_term(Monomial::y(d, nb, i), &FourierSeries::constant(d, C64::new(-w, 0.0)));
    }
    let mut neg = p_next.empty_like();
    neg.add_jet_zzb(&b_update.scale_re(-1.0));
    p_next = p_next.add(&neg)?;
    p_next.prune();
    p_next.set_reference((s1, r1));
    // Cancellation in the solved modes leaves roundoff that is not conjugation
    // symmetric; the defect is recorded, then projected out.
    let reality = p_next.reality_violation();
    p_next = p_next.realify();

    let omega_next: Vec<f64> = state.omega.iter().zip(&sol.freq_shift).map(|(a, b)| a + b).collect();
    let split_next = p_next.split_low_high();
    let eps_after = split_next.low.vf_norm(s1, r1);
    let eps_high = split_next.high.vf_norm(s1, r1);
    sol.b_update = b_update.clone();

    let shift = sol.freq_shift.iter().map(|v| v * v).sum::<f64>().sqrt();
    let b_drift = b_update.strip_norm(0.0);
    let next_nf = NormalForm {
        omega: omega_next.clone(),
        big_omega: state.big_omega.clone(),
        b: b_next.clone(),
    };
    let sym = next_nf.symmetry_error();
    let exponent = if eps > 0.0 && eps < 1.0 && eps_after > 0.0 {
        eps_after.ln() / eps.ln()
    } else {
        f64::NAN
    };
    let strict = opts.strict;
    check(strict, &mut warnings, l + 1, "low-order norm vs schedule", eps_after, sched.eps_at(l + 1))?;
    check(strict, &mut warnings, l + 1, "low-order norm vs previous", eps_after, eps)?;
    check(strict, &mut warnings, l + 1, "frequency drift", shift, eps.sqrt())?;
    check(strict, &mut warnings, l + 1, "normal-form drift", b_drift, eps.powf(0.1))?;
    check(strict, &mut warnings, l + 1, "normal-form symmetry", sym, 1e-12)?;
    check(strict, &mut warnings, l + 1, "reality defect", reality, 1e-12)?;

    let record = StepRecord {
        level: l + 1,
        truncation: n,
        truncation_capped: capped,
        tail,
        eps_before: eps,
        eps_after,
        eps_schedule: sched.eps_at(l + 1),
        contraction_exponent: exponent,
        omega_shift: shift,
        b_drift,
        b_symmetry_error: sym,
        reality_defect: reality,
        residuals,
        lie_terms: lie.term_norms.clone(),
        warnings,
    };
    let next = KamState {
        level: l + 1,
        omega: omega_next,
        big_omega: state.big_omega,
        b: b_next,
        p: p_next,
        xi: state.xi,
        eps_low: eps_after,
        eps_high,
    };
    Ok((next, sol, record))
}

/// Problem data: `H₀ = ⟨ω(ξ),y⟩ + ⟨Ωz,z̄⟩ + P₀` for `ξ` in a parameter box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamProblem {
    pub big_omega: Vec<f64>,
    pub freq_map: FrequencyMap,
    pub param_lo: Vec<f64>,
    pub param_hi: Vec<f64>,
    pub perturbation: HamiltonianJet,
}

impl KamProblem {
    pub fn d(&self) -> usize {
        self.freq_map.dim()
    }

    pub fn n(&self) -> usize {
        self.big_omega.len()
    }
}

/// Seeded analytic perturbation with all monomials of weighted degree `≤ max_degree`,
/// coefficients `~e^{−rate|k|_1}` with random phases, realified and scaled so that
/// `vf_norm(s0, r0) = eps`.
#[allow(clippy::too_many_arguments)]
pub fn default_perturbation(
    d: usize,
    n: usize,
    max_degree: u32,
    cutoff: usize,
    rate: f64,
    eps: f64,
    reference: (f64, f64),
    seed: u64,
) -> HamiltonianJet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = HamiltonianJet::new(d, n, max_degree, cutoff, reference);
    for m in Monomial::all_up_to(d, n, max_degree) {
        let modes: Vec<(Vec<i32>, C64)> = crate::fourier::cube(d, cutoff)
            .into_iter()
            .map(|k| {
                let a = (-rate * crate::fourier::norm_l1(&k) as f64).exp() * rng.random_range(0.5..1.0);
                let ph: f64 = rng.random_range(0.0..2.0 * PI);
                (k, C64::from_polar(a, ph))
            })
            .collect();
        p.add_term(m, &FourierSeries::from_modes(d, &modes));
    }
    let p = p.realify();
    let norm = p.vf_norm(reference.0, reference.1);
    if norm > 0.0 {
        p.scale(C64::new(eps / norm, 0.0))
    } else {
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub schedule: ScheduleConfig,
    pub step: StepOptions,
    /// Half-width of the boxes that pave the parameter domain.
    pub atlas_half_width: f64,
    /// Active parameter; drawn from the surviving atlas when absent.
    pub xi: Option<Vec<f64>>,
    pub seed: u64,
    pub max_levels: usize,
    pub stop: f64,
    /// Decay rate of the perturbation kernel used for the initial Green's certificate.
    pub rho: f64,
}

impl RunOptions {
    pub fn new(d: usize, eps: f64) -> Self {
        RunOptions {
            schedule: ScheduleConfig::new(d, eps),
            step: StepOptions::default(),
            atlas_half_width: 0.01,
            xi: None,
            seed: 0,
            max_levels: 6,
            stop: 1e-14,
            rho: 1.0,
        }
    }
}

/// Green's function certificate for `T_{l*−1}` on `[−A^{l*}, A^{l*}]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialCertificate {
    pub certificate: DecayCertificate,
    /// `ε` of the symbol as a perturbation of the diagonal.
    pub perturbation: f64,
    /// Set when the Neumann gate failed and the certificate comes from direct inversion.
    pub direct_fallback: bool,
    pub sound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialReport {
    pub l_star: u32,
    pub exclusion: ExclusionRule,
    pub atlas_fraction: f64,
    pub removed_measure: f64,
    pub smallness: f64,
    pub certificate: InitialCertificate,
}

/// Why `ξ` fails the initial exclusion, or `None` when it passes.
pub fn exclusion_diagnostics(rule: &ExclusionRule, omega: &[f64], big_omega: &[f64]) -> Option<String> {
    let dio = diophantine_ok(omega, rule.n, rule.gamma_dioph, rule.tau);
    if !dio.ok {
        return Some(format!(
            "Diophantine condition fails at k={:?} (ratio {:.3e})",
            dio.worst_k, dio.worst_ratio
        ));
    }
    for (doubled, name) in [(false, "first Melnikov"), (true, "doubled Melnikov")] {
        let m = melnikov1_ok(omega, big_omega, rule.n, rule.gamma_mel, rule.tau, doubled);
        if !m.ok {
            return Some(format!(
                "{name} condition fails at j={:?}, k={:?} (ratio {:.3e})",
                m.worst_js, m.worst_k, m.worst_ratio
            ));
        }
    }
    None
}

fn initial_certificate(state: &KamState, n: usize, rho: f64) -> Result<InitialCertificate, DriverError> {
    let t = state.lattice_operator(n);
    let diag = LatticeMatrix::diagonal(t.dim(), n, t.omega().to_vec(), t.shifts().to_vec());
    let dopts = DirectOptions {
        threshold: 1.0,
        ..Default::default()
    };
    let (_, dcert) = invert_direct(&diag, &dopts)?;
    let delta = variation_delta(&diag, &t, rho);
    let (g, _) = invert_direct(&t, &dopts)?;
    let (certificate, direct_fallback) =
        match neumann_transfer(&dcert, t.sites(), t.block(), delta, &NeumannOptions::default()) {
            Ok(c) => (c, false),
            Err(_) => (invert_direct(&t, &dopts)?.1, true),
        };
    let sound = check_soundness(&certificate, &g, t.sites(), t.block()).sound();
    Ok(InitialCertificate {
        certificate,
        perturbation: delta.eps,
        direct_fallback,
        sound,
    })
}

/// Builds the atlas at level `l*`, fixes the active parameter and returns the starting state.
pub fn initial_step(
    problem: &KamProblem,
    sched: &KamSchedule,
    opts: &RunOptions,
) -> Result<(KamState, ParameterAtlas, InitialReport), DriverError> {
    let p0 = &problem.perturbation;
    let reality = p0.reality_violation();
    if reality > 1e-12 {
        return Err(DriverError::NotReal(reality));
    }
    let rule = sched.exclusion_rule();
    let big = problem.big_omega.clone();
    let map = problem.freq_map.clone();
    let base = ParameterAtlas::tile(&problem.param_lo, &problem.param_hi, opts.atlas_half_width, 0)?;
    let (atlas, removed) = pave_and_filter(&base, sched.l_star, opts.atlas_half_width, |xi: &[f64]| {
        rule.passes(&map.eval(xi), &big)
    })?;
    if atlas.is_empty() {
        return Err(DriverError::EmptyAtlas);
    }
    let xi = match &opts.xi {
        Some(x) => x.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            random_point(&atlas, &mut rng).ok_or(DriverError::EmptyAtlas)?
        }
    };
    let omega = problem.freq_map.eval(&xi);
    if let Some(reason) = exclusion_diagnostics(&rule, &omega, &problem.big_omega) {
        return Err(DriverError::Excluded { xi, reason });
    }
    let (d, n) = (problem.d(), problem.n());
    let l = sched.l_star;
    let mut p = p0.clone();
    p.set_reference((sched.s_at(l), sched.r_at(l)));
    let split = p.split_low_high();
    let state = KamState {
        level: l,
        omega,
        big_omega: problem.big_omega.clone(),
        b: FourierSeries::zeros(d, 0, n, n),
        eps_low: split.low.vf_norm(sched.s_at(l), sched.r_at(l)),
        eps_high: split.high.vf_norm(sched.s_at(l), sched.r_at(l)),
        p,
        xi,
    };
    let cert_n = (sched.a.powi(l as i32).round() as usize).min(sched.n_max);
    let certificate = initial_certificate(&state, cert_n, opts.rho)?;
    let report = InitialReport {
        l_star: l,
        exclusion: rule,
        atlas_fraction: atlas.volume() / base.volume(),
        removed_measure: removed,
        smallness: p0.vf_norm(sched.s0, sched.r0),
        certificate,
    };
    Ok((state, atlas, report))
}

/// `sup_x |X_H − (ω_*, 0, 0, 0)|` on `y = z = z̄ = 0`, bounded by coefficient sums.
pub fn torus_residual(p: &HamiltonianJet) -> f64 {
    let (d, n) = (p.d(), p.n());
    let l1 = |f: &FourierSeries| f.strip_norm(0.0);
    let e2 = |v: Vec<f64>| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let dx = e2((0..d).map(|i| l1(&p.coeff(&Monomial::y(d, n, i)))).collect());
    let c = p.coeff(&Monomial::one(d, n));
    let dy = e2((0..d).map(|i| l1(&c.partial(i))).collect());
    let dz = e2((0..n).map(|j| l1(&p.coeff(&Monomial::zb(d, n, j)))).collect());
    let dzb = e2((0..n).map(|j| l1(&p.coeff(&Monomial::z(d, n, j)))).collect());
    dx + dy + dz + dzb
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: u32,
    pub eps_meas: f64,
    pub eps_sched: f64,
    pub omega_shift: f64,
    pub b_symmetry_err: f64,
    pub residual: f64,
}

impl LevelRow {
    pub const HEADER: &'static str = "level,eps_meas,eps_sched,omega_shift,B_symmetry_err,residual";

    pub fn csv(&self) -> String {
        format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            self.level, self.eps_meas, self.eps_sched, self.omega_shift, self.b_symmetry_err, self.residual
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusResult {
    pub xi: Vec<f64>,
    pub omega_star: Vec<f64>,
    pub b_final: FourierSeries,
    pub transformations: Vec<HomologicalSolution>,
    pub residual: f64,
    pub final_eps: f64,
    pub atlas: ParameterAtlas,
    pub initial: InitialReport,
    pub steps: Vec<StepRecord>,
    pub rows: Vec<LevelRow>,
    pub final_state: KamState,
}

impl TorusResult {
    /// `ln ε_{l+1} / ln ε_l` for every accepted step.
    pub fn contraction_exponents(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.contraction_exponent).collect()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(LevelRow::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }
}

/// Iterates [`kam_step`] from the initial state until the low-order norm drops
/// below `opts.stop` or `opts.max_levels` steps were taken.
pub fn run(problem: &KamProblem, opts: &RunOptions) -> Result<TorusResult, DriverError> {
    let sched = make_schedule(&opts.schedule)?;
    let (mut state, atlas, initial) = initial_step(problem, &sched, opts)?;
    let mut rows = vec![LevelRow {
        level: state.level,
        eps_meas: state.eps_low,
        eps_sched: sched.eps_at(state.level),
        omega_shift: 0.0,
        b_symmetry_err: 0.0,
        residual: 0.0,
    }];
    let mut steps = Vec::new();
    let mut transformations = Vec::new();
    while steps.len() < opts.max_levels && state.eps_low >= opts.stop {
        let (next, sol, rec) = kam_step(state, &sched, &opts.step)?;
        rows.push(LevelRow {
            level: rec.level,
            eps_meas: rec.eps_after,
            eps_sched: rec.eps_schedule,
            omega_shift: rec.omega_shift,
            b_symmetry_err: rec.b_symmetry_error,
            residual: rec.residuals.max(),
        });
        steps.push(rec);
        transformations.push(sol);
        state = next;
    }
    Ok(TorusResult {
        xi: state.xi.clone(),
        omega_star: state.omega.clone(),
        b_final: state.b.clone(),
        transformations,
        residual: torus_residual(&state.p),
        final_eps: state.eps_low,
        atlas,
        initial,
        steps,
        rows,
        final_state: state,
    })
}
