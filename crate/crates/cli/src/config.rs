//! TOML run configuration: loading, validation and normalized emission.
//!
//! Grammar (every section except `[system]` is optional; omitted keys take
//! their defaults, and every report echoes the fully normalized config):
//!
//! ```toml
//! mode = "run"            # run | atlas | greens | sigma-scan | stability | verify
//! seed = 0
//!
//! [system]
//! d = 2
//! n = 1
//! big_omega = [1.0]       # normal frequencies, length n
//! param_lo = [1.0, 1.0]   # parameter box, length d each
//! param_hi = [2.0, 2.0]
//! xi = [1.31, 1.47]       # optional active parameter
//! # optional frequency map; identity when absent
//! [[system.omega_map]]
//! component = 0
//! coeff = 1.0
//! powers = [1, 0]
//!
//! [schedule]
//! a = 10.0
//! s0 = 0.6
//! r0 = 0.5
//! tau = 4.0               # optional, defaults to d + 2
//! n_max = 16
//! constants = [2.0, 3.0, 17.0, 4.0, 5.0, 14.0, 11.0, 16.0, 12.0]
//!
//! [perturbation]
//! eps = 1e-6
//! max_degree = 4
//! cutoff = 20
//! rate = 1.8
//! literal = """           # optional; replaces the seeded generator
//! 1 @ 1,0 = 0.5
//! 1 @ -1,0 = 0.5
//! """
//! ```
//!
//! With `literal` the perturbation is `eps` times the parsed jet; otherwise a
//! seeded analytic jet normalized to `vf_norm(s0, r0) = eps`.

use std::path::Path;

use kam_core::atlas::FrequencyMap;
use kam_core::driver::{constant_violations, default_perturbation, RunOptions, StepOptions, DEFAULT_CONSTANTS};
use kam_core::fourier::C64;
use kam_core::jet::HamiltonianJet;
use kam_core::multiscale::SigmaGrid;
use kam_core::audit::SigmaSetup;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{} violation(s):\n  {}", .0.len(), .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Run,
    Atlas,
    Greens,
    SigmaScan,
    Stability,
    Verify,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Run => "run",
            Mode::Atlas => "atlas",
            Mode::Greens => "greens",
            Mode::SigmaScan => "sigma-scan",
            Mode::Stability => "stability",
            Mode::Verify => "verify",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        [Mode::Run, Mode::Atlas, Mode::Greens, Mode::SigmaScan, Mode::Stability, Mode::Verify]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapTerm {
    pub component: usize,
    pub coeff: f64,
    pub powers: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub d: usize,
    pub n: usize,
    pub big_omega: Vec<f64>,
    pub param_lo: Vec<f64>,
    pub param_hi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_map: Option<Vec<MapTerm>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub a: f64,
    pub s0: f64,
    pub r0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub n_max: usize,
    pub constants: [f64; 9],
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            a: 10.0,
            s0: 0.6,
            r0: 0.5,
            tau: None,
            n_max: 16,
            constants: DEFAULT_CONSTANTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSection {
    pub eps: f64,
    pub max_degree: u32,
    pub cutoff: usize,
    pub rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub literal: Option<String>,
}

impl Default for PerturbationSection {
    fn default() -> Self {
        PerturbationSection {
            eps: 1e-6,
            max_degree: 4,
            cutoff: 20,
            rate: 1.8,
            literal: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Caps {
    pub levels: usize,
    pub stop: f64,
    pub atlas_half_width: f64,
    pub contraction: f64,
    pub tail_fraction: f64,
    pub lie_order: usize,
    pub cond_cap: f64,
    pub rho: f64,
    /// Hard failure on broken level invariants instead of a warning.
    pub strict: bool,
    /// Torus residual must stay below this multiple of the final low-order norm.
    pub residual_factor: f64,
    pub symmetry_tol: f64,
    pub reality_tol: f64,
}

impl Default for Caps {
    fn default() -> Self {
        let step = StepOptions::default();
        Caps {
            levels: 6,
            stop: 1e-14,
            atlas_half_width: 0.01,
            contraction: step.contraction,
            tail_fraction: step.tail_fraction,
            lie_order: step.lie_order,
            cond_cap: step.cond_cap,
            rho: 1.0,
            strict: true,
            residual_factor: 10.0,
            symmetry_tol: 1e-12,
            reality_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearizationSource {
    /// `B = 0`.
    Zero,
    /// `B` and `ω` from a full run of the configured system.
    Run,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySection {
    pub source: LinearizationSource,
    pub dt: f64,
    pub t_end: f64,
    pub t_long: f64,
    /// Initial torus phases `x₀`; one trajectory each. Empty means `x₀ = 0`.
    pub phases: Vec<Vec<f64>>,
    /// Initial `z₀` as `[re, im]` pairs; `(1, 0)` in every component when empty.
    pub z0: Vec<[f64; 2]>,
    pub order_dts: Vec<f64>,
    pub order_t_end: f64,
    pub drift_tol: f64,
    pub lyapunov_tol: f64,
    /// Every `csv_stride`-th step goes to the trajectory CSV.
    pub csv_stride: usize,
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection {
            source: LinearizationSource::Run,
            dt: 1e-3,
            t_end: 10.0,
            t_long: 100.0,
            phases: Vec::new(),
            z0: Vec::new(),
            order_dts: vec![0.2, 0.1, 0.05],
            order_t_end: 10.0,
            drift_tol: 1e-8,
            lyapunov_tol: 1e-6,
            csv_stride: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GreensSection {
    pub instances: usize,
    pub min_certificates: usize,
}

impl Default for GreensSection {
    fn default() -> Self {
        GreensSection {
            instances: 300,
            min_certificates: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigmaSection {
    pub omega: Vec<f64>,
    pub shifts: Vec<f64>,
    pub n: usize,
    pub delta: f64,
    pub lo: f64,
    pub hi: f64,
    pub points_per_unit: f64,
    pub refine: usize,
    pub symbol_eps: f64,
    pub symbol_rho: f64,
}

impl Default for SigmaSection {
    fn default() -> Self {
        let e = SigmaSetup::example();
        SigmaSection {
            omega: e.omega,
            shifts: e.shifts,
            n: e.n,
            delta: e.delta,
            lo: e.grid.lo,
            hi: e.grid.hi,
            points_per_unit: e.grid.points_per_unit,
            refine: e.grid.refine,
            symbol_eps: e.symbol_eps,
            symbol_rho: e.symbol_rho,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtlasSection {
    /// `ε` values for the excluded-measure scaling study.
    pub eps_list: Vec<f64>,
    pub samples: usize,
    /// Accepted band for the log-log slope of excluded fraction against `ε`.
    pub slope_band: [f64; 2],
    pub max_factor: f64,
}

impl Default for AtlasSection {
    fn default() -> Self {
        AtlasSection {
            eps_list: vec![1e-4, 1e-5, 1e-6],
            samples: 400_000,
            slope_band: [0.35, 0.65],
            max_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Saved `report.json` to replay.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    pub system: SystemConfig,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub perturbation: PerturbationSection,
    #[serde(default)]
    pub caps: Caps,
    #[serde(default)]
    pub stability: StabilitySection,
    #[serde(default)]
    pub greens: GreensSection,
    #[serde(default)]
    pub sigma: SigmaSection,
    #[serde(default)]
    pub atlas: AtlasSection,
    #[serde(default)]
    pub verify: VerifySection,
}

fn default_mode() -> Mode {
    Mode::Run
}

fn check_len(v: &mut Vec<String>, key: &str, got: usize, want: usize) {
    if got != want {
        v.push(format!("{key}: expected {want} entries, got {got}"));
    }
}

fn check_pos(v: &mut Vec<String>, key: &str, x: f64) {
    if !(x.is_finite() && x > 0.0) {
        v.push(format!("{key} must be positive and finite, got {x}"));
    }
}

fn check_finite(v: &mut Vec<String>, key: &str, xs: &[f64]) {
    if xs.iter().any(|x| !x.is_finite()) {
        v.push(format!("{key} must be finite"));
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub levels: Option<usize>,
    pub strict: Option<bool>,
}

impl RunConfig {
    /// A small valid configuration for `d = 2`, `n = 1` on `[1, 2]²`.
    pub fn example() -> Self {
        RunConfig {
            mode: Mode::Run,
            seed: 0,
            system: SystemConfig {
                d: 2,
                n: 1,
                big_omega: vec![1.0],
                param_lo: vec![1.0, 1.0],
                param_hi: vec![2.0, 2.0],
                xi: None,
                omega_map: None,
            },
            schedule: Default::default(),
            perturbation: Default::default(),
            caps: Default::default(),
            stability: Default::default(),
            greens: Default::default(),
            sigma: Default::default(),
            atlas: Default::default(),
            verify: Default::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with(text, &Overrides::default())
    }

    pub fn from_toml_with(text: &str, over: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Some(m) = over.mode {
            cfg.mode = m;
        }
        if let Some(s) = over.seed {
            cfg.seed = s;
        }
        if let Some(l) = over.levels {
            cfg.caps.levels = l;
        }
        if let Some(s) = over.strict {
            cfg.caps.strict = s;
        }
        let v = cfg.violations();
        if v.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    /// Normalized TOML with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Every violated constraint, in a fixed order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let s = &self.system;
        if s.d == 0 {
            v.push("system.d must be at least 1".into());
        }
        check_len(&mut v, "system.big_omega", s.big_omega.len(), s.n);
        check_finite(&mut v, "system.big_omega", &s.big_omega);
        if s.big_omega.iter().any(|&o| o <= 0.0) {
            v.push("system.big_omega: normal frequencies must be positive".into());
        }
        check_len(&mut v, "system.param_lo", s.param_lo.len(), s.d);
        check_len(&mut v, "system.param_hi", s.param_hi.len(), s.d);
        check_finite(&mut v, "system.param_lo", &s.param_lo);
        check_finite(&mut v, "system.param_hi", &s.param_hi);
        for (i, (a, b)) in s.param_lo.iter().zip(&s.param_hi).enumerate() {
            if !(a < b) {
                v.push(format!("system.param_lo[{i}] < system.param_hi[{i}] violated ({a} vs {b})"));
            }
        }
        if let Some(xi) = &s.xi {
            check_len(&mut v, "system.xi", xi.len(), s.d);
            let inside = xi
                .iter()
                .zip(s.param_lo.iter().zip(&s.param_hi))
                .all(|(x, (a, b))| a <= x && x <= b);
            if !inside {
                v.push("system.xi must lie in the parameter box".into());
            }
        }
        if let Some(map) = &s.omega_map {
            let mut seen = vec![false; s.d];
            for (i, t) in map.iter().enumerate() {
                if t.component >= s.d {
                    v.push(format!("system.omega_map[{i}].component must be below d = {}", s.d));
                } else {
                    seen[t.component] = true;
                }
                check_len(&mut v, &format!("system.omega_map[{i}].powers"), t.powers.len(), s.d);
                check_finite(&mut v, &format!("system.omega_map[{i}].coeff"), &[t.coeff]);
            }
            if seen.iter().any(|x| !x) {
                v.push("system.omega_map must give every component at least one term".into());
            }
        }

        let sc = &self.schedule;
        if !(sc.a.is_finite() && sc.a > 1.0) {
            v.push(format!("schedule.a > 1 violated ({})", sc.a));
        }
        check_pos(&mut v, "schedule.s0", sc.s0);
        check_pos(&mut v, "schedule.r0", sc.r0);
        if let Some(t) = sc.tau {
            check_pos(&mut v, "schedule.tau", t);
        }
        if sc.n_max == 0 {
            v.push("schedule.n_max must be at least 1".into());
        }
        for c in constant_violations(&sc.constants) {
            v.push(format!("schedule.constants: {c}"));
        }

        let p = &self.perturbation;
        if !(p.eps.is_finite() && p.eps > 0.0 && p.eps < 1.0) {
            v.push(format!("perturbation.eps must lie in (0, 1), got {}", p.eps));
        }
        if !(1..=4).contains(&p.max_degree) {
            v.push(format!("perturbation.max_degree must be 1..=4, got {}", p.max_degree));
        }
        check_pos(&mut v, "perturbation.rate", p.rate);
        if p.cutoff > 40 {
            v.push(format!("perturbation.cutoff at most 40, got {}", p.cutoff));
        }
        if let Some(lit) = &p.literal {
            if s.d > 0 {
                if let Err(e) = HamiltonianJet::parse_literal(lit, s.d, s.n, p.max_degree, p.cutoff, (sc.s0, sc.r0)) {
                    v.push(format!("perturbation.literal: {e}"));
                }
            }
        }

        let c = &self.caps;
        check_pos(&mut v, "caps.stop", c.stop);
        check_pos(&mut v, "caps.atlas_half_width", c.atlas_half_width);
        if !(c.contraction > 1.0 && c.contraction < 2.0) {
            v.push(format!("caps.contraction must lie in (1, 2), got {}", c.contraction));
        }
        check_pos(&mut v, "caps.tail_fraction", c.tail_fraction);
        if c.lie_order == 0 {
            v.push("caps.lie_order must be at least 1".into());
        }
        check_pos(&mut v, "caps.cond_cap", c.cond_cap);
        check_pos(&mut v, "caps.rho", c.rho);
        check_pos(&mut v, "caps.residual_factor", c.residual_factor);
        check_pos(&mut v, "caps.symmetry_tol", c.symmetry_tol);
        check_pos(&mut v, "caps.reality_tol", c.reality_tol);

        let st = &self.stability;
        check_pos(&mut v, "stability.dt", st.dt);
        check_pos(&mut v, "stability.t_end", st.t_end);
        check_pos(&mut v, "stability.t_long", st.t_long);
        for (i, ph) in st.phases.iter().enumerate() {
            check_len(&mut v, &format!("stability.phases[{i}]"), ph.len(), s.d);
        }
        if !st.z0.is_empty() {
            check_len(&mut v, "stability.z0", st.z0.len(), s.n);
        }
        if st.order_dts.len() < 2 {
            v.push("stability.order_dts needs at least two steps".into());
        }
        for (i, &dt) in st.order_dts.iter().enumerate() {
            check_pos(&mut v, &format!("stability.order_dts[{i}]"), dt);
        }
        check_pos(&mut v, "stability.order_t_end", st.order_t_end);
        check_pos(&mut v, "stability.drift_tol", st.drift_tol);
        check_pos(&mut v, "stability.lyapunov_tol", st.lyapunov_tol);
        if st.csv_stride == 0 {
            v.push("stability.csv_stride must be at least 1".into());
        }
        if st.source == LinearizationSource::Zero && s.n == 0 {
            v.push("stability needs n ≥ 1".into());
        }

        if self.greens.instances == 0 {
            v.push("greens.instances must be at least 1".into());
        }

        let sg = &self.sigma;
        if sg.omega.is_empty() {
            v.push("sigma.omega must be nonempty".into());
        }
        if sg.shifts.is_empty() {
            v.push("sigma.shifts must be nonempty".into());
        }
        check_finite(&mut v, "sigma.omega", &sg.omega);
        check_finite(&mut v, "sigma.shifts", &sg.shifts);
        if !(sg.lo < sg.hi) {
            v.push(format!("sigma.lo < sigma.hi violated ({} vs {})", sg.lo, sg.hi));
        }
        if !(sg.delta.is_finite() && sg.delta >= 0.0) {
            v.push("sigma.delta must be nonnegative".into());
        }
        check_pos(&mut v, "sigma.points_per_unit", sg.points_per_unit);
        if !(sg.symbol_eps.is_finite() && sg.symbol_eps >= 0.0) {
            v.push("sigma.symbol_eps must be nonnegative".into());
        }
        check_pos(&mut v, "sigma.symbol_rho", sg.symbol_rho);

        let at = &self.atlas;
        if at.eps_list.len() < 2 {
            v.push("atlas.eps_list needs at least two values".into());
        }
        for (i, &e) in at.eps_list.iter().enumerate() {
            if !(e > 0.0 && e < 1.0) {
                v.push(format!("atlas.eps_list[{i}] must lie in (0, 1)"));
            }
        }
        if at.samples == 0 {
            v.push("atlas.samples must be at least 1".into());
        }
        if !(at.slope_band[0] < at.slope_band[1]) {
            v.push("atlas.slope_band must be increasing".into());
        }
        if !(at.max_factor >= 1.0) {
            v.push("atlas.max_factor must be at least 1".into());
        }

        if self.mode == Mode::Verify && self.verify.report.is_none() {
            v.push("verify.report is required in verify mode".into());
        }
        v
    }

    pub fn freq_map(&self) -> FrequencyMap {
        match &self.system.omega_map {
            None => FrequencyMap::identity(self.system.d),
            Some(terms) => {
                let mut rows = vec![Vec::new(); self.system.d];
                for t in terms {
                    rows[t.component].push((t.coeff, t.powers.clone()));
                }
                FrequencyMap { terms: rows }
            }
        }
    }

    pub fn perturbation(&self) -> HamiltonianJet {
        let s = &self.system;
        let p = &self.perturbation;
        let reference = (self.schedule.s0, self.schedule.r0);
        match &p.literal {
            Some(lit) => HamiltonianJet::parse_literal(lit, s.d, s.n, p.max_degree, p.cutoff, reference)
                .expect("literal validated at load")
                .scale(C64::new(p.eps, 0.0)),
            None => default_perturbation(s.d, s.n, p.max_degree, p.cutoff, p.rate, p.eps, reference, self.seed),
        }
    }

    pub fn run_options(&self) -> RunOptions {
        let mut o = RunOptions::new(self.system.d, self.perturbation.eps);
        o.schedule.a = self.schedule.a;
        o.schedule.s0 = self.schedule.s0;
        o.schedule.r0 = self.schedule.r0;
        o.schedule.tau = self.schedule.tau;
        o.schedule.n_max = self.schedule.n_max;
        o.schedule.constants = self.schedule.constants;
        o.step = StepOptions {
            contraction: self.caps.contraction,
            tail_fraction: self.caps.tail_fraction,
            lie_order: self.caps.lie_order,
            cond_cap: self.caps.cond_cap,
            strict: self.caps.strict,
        };
        o.atlas_half_width = self.caps.atlas_half_width;
        o.xi = self.system.xi.clone();
        o.seed = self.seed;
        o.max_levels = self.caps.levels;
        o.stop = self.caps.stop;
        o.rho = self.caps.rho;
        o
    }

    pub fn sigma_setup(&self) -> SigmaSetup {
        let s = &self.sigma;
        SigmaSetup {
            omega: s.omega.clone(),
            shifts: s.shifts.clone(),
            n: s.n,
            delta: s.delta,
            grid: SigmaGrid {
                lo: s.lo,
                hi: s.hi,
                points_per_unit: s.points_per_unit,
                refine: s.refine,
            },
            symbol_eps: s.symbol_eps,
            symbol_rho: s.symbol_rho,
            seed: self.seed,
        }
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    load_config(path, &Overrides::default())
}

pub fn load_config(path: &Path, over: &Overrides) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RunConfig::from_toml_with(&text, over)
}
