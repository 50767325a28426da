//! Mode execution. Everything here is a pure function of the configuration
//! (and, for `verify`, of the saved report), so reruns are byte-identical.

use std::path::Path;

use kam_core::atlas::{excluded_fraction_mc, pave_and_filter, ParameterAtlas};
use kam_core::audit::{exclusion_scaling, sigma_comparison, soundness_campaign};
use kam_core::driver::{make_schedule, run, DriverError, KamProblem, ScheduleConfig, TorusResult};
use kam_core::fourier::{FourierSeries, C64, I, ZERO};
use kam_core::stability::{
    drift_detector, integrate_linearized_from, integrate_with, l2_drift, lyapunov_estimate, lyapunov_halves,
    order_study, LinearTrajectory,
};
use nalgebra::DMatrix;
use serde_json::json;

use crate::config::{LinearizationSource, Mode, RunConfig};
use crate::report::{Check, ExitClass, Outcome, Report, Status, SCHEMA};

struct Draft {
    status: Status,
    checks: Vec<Check>,
    warnings: Vec<String>,
    payload: serde_json::Value,
    sidecars: Vec<(String, String)>,
}

impl Draft {
    fn new() -> Self {
        Draft {
            status: Status::new(ExitClass::Ok, ""),
            checks: Vec::new(),
            warnings: Vec::new(),
            payload: json!({}),
            sidecars: Vec::new(),
        }
    }

    fn fail(class: ExitClass, message: impl Into<String>, payload: serde_json::Value) -> Self {
        Draft {
            status: Status::new(class, message),
            payload,
            ..Draft::new()
        }
    }

    /// Downgrades an `Ok` status to `Numeric` when a hard check failed.
    fn settle(mut self) -> Self {
        if self.status.class == ExitClass::Ok {
            let failed: Vec<String> = self.checks.iter().filter(|c| c.hard && !c.pass).map(|c| c.name.clone()).collect();
            if !failed.is_empty() {
                self.status = Status::new(ExitClass::Numeric, format!("hard checks failed: {}", failed.join(", ")));
            }
        }
        self
    }
}

fn driver_failure(e: &DriverError) -> Draft {
    let class = if e.is_exclusion() { ExitClass::Exclusion } else { ExitClass::Numeric };
    let payload = match e {
        DriverError::Excluded { xi, reason } => json!({ "excluded_xi": xi, "reason": reason }),
        _ => json!({ "error": e.to_string() }),
    };
    Draft::fail(class, e.to_string(), payload)
}

fn problem(cfg: &RunConfig) -> KamProblem {
    KamProblem {
        big_omega: cfg.system.big_omega.clone(),
        freq_map: cfg.freq_map(),
        param_lo: cfg.system.param_lo.clone(),
        param_hi: cfg.system.param_hi.clone(),
        perturbation: cfg.perturbation(),
    }
}

/// Nonzero modes of a matrix-valued series as `{k, entries: [[re, im], ...]}`.
fn series_modes(f: &FourierSeries) -> serde_json::Value {
    let modes: Vec<serde_json::Value> = f
        .modes()
        .map(|(k, blk)| json!({ "k": k, "entries": blk.iter().map(|v| [v.re, v.im]).collect::<Vec<_>>() }))
        .collect();
    json!(modes)
}

fn run_checks(cfg: &RunConfig, res: &TorusResult, d: &mut Draft) {
    let strict = cfg.caps.strict;
    for s in &res.steps {
        let l = s.level;
        d.checks.push(Check::band(format!("contraction[{l}]"), s.contraction_exponent, Some(1.2), Some(1.5), false));
        d.checks.push(Check::at_most(format!("eps_vs_schedule[{l}]"), s.eps_after, s.eps_schedule, strict));
        d.checks.push(Check::at_most(format!("omega_shift[{l}]"), s.omega_shift, s.eps_before.sqrt(), strict));
        d.checks.push(Check::at_most(format!("b_symmetry[{l}]"), s.b_symmetry_error, cfg.caps.symmetry_tol, true));
        d.checks.push(Check::at_most(format!("reality[{l}]"), s.reality_defect, cfg.caps.reality_tol, true));
        d.checks.push(Check::at_most(format!("homological_residual[{l}]"), s.residuals.max(), 1e-10, true));
        d.warnings.extend(s.warnings.iter().map(|w| format!("level {l}: {w}")));
    }
    d.checks.push(Check::at_most(
        "torus_residual",
        res.residual,
        cfg.caps.residual_factor * res.final_eps,
        true,
    ));
}

fn run_payload(res: &TorusResult) -> serde_json::Value {
    json!({
        "xi": res.xi,
        "omega_star": res.omega_star,
        "final_eps": res.final_eps,
        "torus_residual": res.residual,
        "levels": res.rows,
        "contraction_exponents": res.contraction_exponents(),
        "steps": res.steps,
        "initial": res.initial,
        "atlas_boxes": res.atlas.boxes.len(),
        "b_final": series_modes(&res.b_final),
    })
}

fn run_mode(cfg: &RunConfig) -> Draft {
    match run(&problem(cfg), &cfg.run_options()) {
        Err(e) => driver_failure(&e),
        Ok(res) => {
            let mut d = Draft::new();
            run_checks(cfg, &res, &mut d);
            d.payload = run_payload(&res);
            d.sidecars.push(("levels.csv".into(), res.csv()));
            d.sidecars.push(("atlas.txt".into(), res.atlas.rows()));
            d
        }
    }
}

fn atlas_mode(cfg: &RunConfig) -> Draft {
    let sys = &cfg.system;
    let opts = cfg.run_options();
    let sched = match make_schedule(&opts.schedule) {
        Ok(s) => s,
        Err(e) => return driver_failure(&e),
    };
    let rule = sched.exclusion_rule();
    let map = cfg.freq_map();
    let big = sys.big_omega.clone();
    let pass = |xi: &[f64]| rule.passes(&map.eval(xi), &big);
    let paved = ParameterAtlas::tile(&sys.param_lo, &sys.param_hi, cfg.caps.atlas_half_width, 0)
        .and_then(|base| pave_and_filter(&base, sched.l_star, cfg.caps.atlas_half_width, pass).map(|r| (base, r)));
    let (base, (atlas, removed)) = match paved {
        Ok(x) => x,
        Err(e) => return Draft::fail(ExitClass::Numeric, e.to_string(), json!({})),
    };
    if atlas.is_empty() {
        return driver_failure(&DriverError::EmptyAtlas);
    }
    let mc = excluded_fraction_mc(&sys.param_lo, &sys.param_hi, cfg.atlas.samples, cfg.seed, pass);
    let base_sched = opts.schedule.clone();
    let rule_for = |eps: f64| {
        let sc = ScheduleConfig { eps, ..base_sched.clone() };
        make_schedule(&sc).map(|s| s.exclusion_rule()).unwrap_or(rule)
    };
    let scaling = exclusion_scaling(
        &map,
        &big,
        &sys.param_lo,
        &sys.param_hi,
        rule_for,
        &cfg.atlas.eps_list,
        cfg.atlas.samples,
        cfg.seed,
    );
    let mut d = Draft::new();
    let structure = atlas.check_structure(Some(&base));
    d.checks.push(Check::at_most("atlas_structure_defects", structure.len() as f64, 0.0, true));
    d.checks.push(Check::band(
        "excluded_fraction_slope",
        scaling.slope,
        Some(cfg.atlas.slope_band[0]),
        Some(cfg.atlas.slope_band[1]),
        true,
    ));
    d.checks.push(Check::at_most("sqrt_eps_fit_factor", scaling.max_factor, cfg.atlas.max_factor, true));
    d.warnings.extend(structure);
    d.payload = json!({
        "l_star": sched.l_star,
        "rule": rule,
        "paved_fraction": atlas.volume() / base.volume(),
        "removed_measure": removed,
        "boxes": atlas.boxes.len(),
        "monte_carlo": mc,
        "scaling": scaling,
    });
    let mut csv = String::from("eps,excluded_fraction,stderr\n");
    for p in &scaling.points {
        csv.push_str(&format!("{:.6e},{:.6e},{:.6e}\n", p.eps, p.fraction, p.stderr));
    }
    d.sidecars.push(("atlas.txt".into(), atlas.rows()));
    d.sidecars.push(("scaling.csv".into(), csv));
    d
}

fn greens_mode(cfg: &RunConfig) -> Draft {
    let rep = soundness_campaign(cfg.seed, cfg.greens.instances);
    let mut d = Draft::new();
    d.checks.push(Check::at_most("certificate_violations", rep.violations as f64, 0.0, true));
    d.checks.push(Check::at_least(
        "certificates_issued",
        rep.issued as f64,
        cfg.greens.min_certificates as f64,
        true,
    ));
    let worst = rep.records.iter().filter(|r| r.issued).map(|r| r.worst_ratio).fold(0.0, f64::max);
    let norm = rep.records.iter().filter(|r| r.issued).map(|r| r.norm_ratio).fold(0.0, f64::max);
    d.payload = json!({
        "instances": rep.records.len(),
        "issued": rep.issued,
        "violations": rep.violations,
        "issued_by_kind": rep.issued_by_kind.iter().map(|(k, c)| json!({ "kind": k.name(), "issued": c })).collect::<Vec<_>>(),
        "worst_decay_ratio": worst,
        "worst_norm_ratio": norm,
    });
    let mut csv = String::from("index,kind,d,side,issued,sound,worst_ratio,norm_ratio,note\n");
    for r in &rep.records {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:.6e},{:.6e},\"{}\"\n",
            r.index,
            r.kind.name(),
            r.d,
            r.side,
            u8::from(r.issued),
            u8::from(r.sound),
            r.worst_ratio,
            r.norm_ratio,
            r.note.replace('"', "'")
        ));
    }
    d.sidecars.push(("greens.csv".into(), csv));
    d
}

fn sigma_mode(cfg: &RunConfig) -> Draft {
    let (cmp, scan) = sigma_comparison(&cfg.sigma_setup());
    let mut d = Draft::new();
    d.checks.push(Check::at_most("diagonal_vs_exact", (cmp.diagonal - cmp.exact).abs(), cmp.spacing, true));
    let ratio = if cmp.diagonal > 0.0 { cmp.perturbed / cmp.diagonal } else { f64::NAN };
    if cmp.exact > 0.0 {
        d.checks.push(Check::band("perturbed_over_diagonal", ratio, Some(0.5), Some(2.0), true));
    }
    d.payload = json!({ "comparison": cmp, "intervals": scan.intervals, "bad_fraction": scan.bad_fraction });
    d.sidecars.push(("sigma.txt".into(), scan.columns()));
    d
}

/// `(ω, Ω, B)` of the linearization plus the run it came from, if any.
fn linearization(cfg: &RunConfig) -> Result<(Vec<f64>, Vec<f64>, FourierSeries, Option<TorusResult>), Draft> {
    let sys = &cfg.system;
    match cfg.stability.source {
        LinearizationSource::Zero => {
            let xi = sys.xi.clone().unwrap_or_else(|| {
                sys.param_lo.iter().zip(&sys.param_hi).map(|(a, b)| 0.5 * (a + b)).collect()
            });
            Ok((cfg.freq_map().eval(&xi), sys.big_omega.clone(), FourierSeries::zeros(sys.d, 0, sys.n, sys.n), None))
        }
        LinearizationSource::Run => match run(&problem(cfg), &cfg.run_options()) {
            Err(e) => Err(driver_failure(&e)),
            Ok(res) => Ok((res.omega_star.clone(), sys.big_omega.clone(), res.b_final.clone(), Some(res))),
        },
    }
}

fn subsample(t: &LinearTrajectory, stride: usize) -> LinearTrajectory {
    let keep: Vec<usize> = (0..t.times.len()).filter(|i| i % stride == 0 || *i + 1 == t.times.len()).collect();
    LinearTrajectory {
        times: keep.iter().map(|&i| t.times[i]).collect(),
        z: keep.iter().map(|&i| t.z[i].clone()).collect(),
        x: keep.iter().map(|&i| t.x[i].clone()).collect(),
    }
}

fn stability_mode(cfg: &RunConfig) -> Draft {
    let (omega, big, b, res) = match linearization(cfg) {
        Ok(x) => x,
        Err(d) => return d,
    };
    let st = &cfg.stability;
    let n = big.len();
    let z0: Vec<C64> = if st.z0.is_empty() {
        vec![C64::new(1.0, 0.0); n]
    } else {
        st.z0.iter().map(|p| C64::new(p[0], p[1])).collect()
    };
    let phases = if st.phases.is_empty() { vec![vec![0.0; omega.len()]] } else { st.phases.clone() };
    let mut d = Draft::new();
    let mut rows = Vec::new();
    let mut csv = String::from("phase,drift,lyapunov_half,lyapunov_full\n");
    for (i, x0) in phases.iter().enumerate() {
        let short = integrate_linearized_from(&omega, &big, &b, &z0, x0, st.t_end, st.dt, 1);
        let long = integrate_linearized_from(&omega, &big, &b, &z0, x0, st.t_long, st.dt, 1000);
        let drift = l2_drift(&short);
        let (half, full) = lyapunov_halves(&long);
        d.checks.push(Check::at_most(format!("l2_drift[{i}]"), drift, st.drift_tol, true));
        d.checks.push(Check::at_most(format!("lyapunov[{i}]"), full.abs(), st.lyapunov_tol, true));
        csv.push_str(&format!("{i},{drift:.6e},{half:.6e},{full:.6e}\n"));
        rows.push(json!({ "x0": x0, "drift": drift, "lyapunov_half": half, "lyapunov_full": full }));
        if i == 0 {
            d.sidecars.push(("trajectory.csv".into(), subsample(&short, st.csv_stride).csv()));
        }
    }
    let study = order_study(&omega, &big, &b, &z0, st.order_t_end, &st.order_dts);
    d.checks.push(Check::band("integrator_order", study.error_order, Some(3.5), Some(4.5), true));
    d.checks.push(Check::at_least("drift_order", study.drift_order, 3.5, false));
    let mut order_csv = String::from("dt,max_error,drift\n");
    for r in &study.rows {
        order_csv.push_str(&format!("{:.6e},{:.6e},{:.6e}\n", r.dt, r.max_error, r.drift));
    }

    // Sentinels: a non-symmetric coupling must register as drift, a planted
    // gain as its exponent.
    let w = [1.0, 1.618_033_988_749_895];
    let skew = FourierSeries::constant_matrix(2, 2, 2, &[ZERO, C64::new(0.05, 0.0), C64::new(-0.05, 0.0), ZERO]);
    let sentinel = integrate_linearized_from(&w, &[1.0, 1.0], &skew, &[C64::new(1.0, 0.0), C64::new(0.5, 0.0)], &[0.0, 0.0], st.t_end, st.dt, 10);
    let verdict = drift_detector(&sentinel, st.drift_tol);
    d.checks.push(Check::at_least("nonsymmetric_sentinel_drift", verdict.max_drift, st.drift_tol, true));
    let (times, zs) = integrate_with(
        |_| DMatrix::from_element(1, 1, I + C64::new(0.01, 0.0)),
        &[C64::new(1.0, 0.0)],
        st.t_long,
        st.dt * 10.0,
        1000,
    );
    let gain = lyapunov_estimate(&LinearTrajectory {
        x: vec![Vec::new(); times.len()],
        times,
        z: zs,
    });
    d.checks.push(Check::at_most("gain_sentinel_error", (gain - 0.01).abs(), 1e-6, true));

    d.payload = json!({
        "omega": omega,
        "big_omega": big,
        "b_modes": series_modes(&b),
        "trajectories": rows,
        "order": study,
        "sentinel": verdict,
        "gain_sentinel": gain,
        "run_final_eps": res.as_ref().map(|r| r.final_eps),
    });
    d.sidecars.push(("stability.csv".into(), csv));
    d.sidecars.push(("order.csv".into(), order_csv));
    d
}

fn verify_mode(cfg: &RunConfig, base: &Path) -> Draft {
    let rel = cfg.verify.report.clone().unwrap_or_default();
    let path = if Path::new(&rel).is_absolute() { Path::new(&rel).to_path_buf() } else { base.join(&rel) };
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => return Draft::fail(ExitClass::Io, format!("cannot read {}: {e}", path.display()), json!({})),
    };
    let saved = match Report::from_json(&text) {
        Ok(r) => r,
        Err(e) => return Draft::fail(ExitClass::Config, e, json!({})),
    };
    let mut d = Draft::new();
    let inconsistent = saved.checks.iter().filter(|c| c.evaluate() != c.pass).count();
    d.checks.push(Check::at_most("saved_verdicts_inconsistent", inconsistent as f64, 0.0, true));
    d.checks.push(Check::at_most("saved_hard_failures", saved.hard_failures().len() as f64, 0.0, true));
    d.checks.push(Check::at_most("saved_status_code", saved.status.code as f64, 0.0, true));
    let replay_base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| base.to_path_buf());
    let replay = execute(&saved.config, &replay_base);
    let identical = replay.report.to_json() == text;
    d.checks.push(Check::at_most("replay_differs", f64::from(u8::from(!identical)), 0.0, true));
    let differing: Vec<String> = saved
        .checks
        .iter()
        .zip(&replay.report.checks)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.name.clone())
        .collect();
    d.payload = json!({
        "report": rel,
        "replayed_mode": saved.mode,
        "replayed_checks": replay.report.checks.len(),
        "differing_checks": differing,
    });
    d
}

/// Runs the configured mode. `base` resolves relative paths in the config.
pub fn execute(cfg: &RunConfig, base: &Path) -> Outcome {
    let draft = match cfg.mode {
        Mode::Run => run_mode(cfg),
        Mode::Atlas => atlas_mode(cfg),
        Mode::Greens => greens_mode(cfg),
        Mode::SigmaScan => sigma_mode(cfg),
        Mode::Stability => stability_mode(cfg),
        Mode::Verify => verify_mode(cfg, base),
    }
    .settle();
    let report = Report {
        schema: SCHEMA.into(),
        mode: cfg.mode,
        seed: cfg.seed,
        config: cfg.clone(),
        status: draft.status,
        checks: draft.checks,
        warnings: draft.warnings,
        sidecars: draft.sidecars.iter().map(|(n, _)| n.clone()).collect(),
        payload: draft.payload,
    };
    Outcome {
        report,
        sidecars: draft.sidecars,
    }
}
