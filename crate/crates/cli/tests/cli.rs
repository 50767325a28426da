//! Drives the `kam` binary end to end: exit codes, artifacts, replay.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kam_cli::Report;
use tempfile::TempDir;

const SYSTEM: &str = "[system]\nd = 2\nn = 1\nbig_omega = [1.0]\nparam_lo = [1.0, 1.0]\nparam_hi = [2.0, 2.0]\n";

fn kam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kam")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run_with(dir: &Path, cfg: &Path, out: &str, extra: &[&str]) -> (i32, PathBuf) {
    let out = dir.join(out);
    let mut args = vec!["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = kam(&args);
    (o.status.code().unwrap(), out)
}

fn report(out: &Path) -> Report {
    Report::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn sigma_config(dir: &Path) -> PathBuf {
    write_config(dir, "sigma.toml", &format!("mode = \"sigma-scan\"\n{SYSTEM}"))
}

#[test]
fn stability_on_zero_coupling_has_no_drift() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "stab.toml",
        &format!("mode = \"stability\"\n{SYSTEM}\n[stability]\nsource = \"zero\"\nt_long = 20.0\n"),
    );
    let (code, out) = run_with(tmp.path(), &cfg, "out", &[]);
    assert_eq!(code, 0);
    let r = report(&out);
    let drift = r.checks.iter().find(|c| c.name == "l2_drift[0]").unwrap();
    assert!(drift.value.unwrap() <= 1e-10, "{drift:?}");
    let order = r.checks.iter().find(|c| c.name == "integrator_order").unwrap();
    assert!(order.pass);
    let traj = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,re_z0,im_z0,norm_sq\n"), "{}", &traj[..40]);
    assert!(out.join("order.csv").exists() && out.join("summary.txt").exists());
}

#[test]
fn resonant_parameter_exits_with_exclusion_code() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "res.toml",
        &format!("mode = \"run\"\n{}xi = [1.5, 1.5]\n\n[caps]\nlevels = 1\n", SYSTEM),
    );
    let (code, out) = run_with(tmp.path(), &cfg, "out", &[]);
    assert_eq!(code, 3);
    let r = report(&out);
    assert_eq!(r.status.code, 3);
    assert_eq!(r.payload["excluded_xi"], serde_json::json!([1.5, 1.5]));
    assert!(r.payload["reason"].as_str().unwrap().contains("Diophantine"), "{}", r.payload);
}

#[test]
fn configuration_errors_exit_two_and_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let unknown = write_config(tmp.path(), "a.toml", &format!("{SYSTEM}colour = 1\n"));
    let o = kam(&["--config", unknown.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    let bad = write_config(
        tmp.path(),
        "b.toml",
        "[system]\nd = 2\nn = 1\nbig_omega = [-1.0]\nparam_lo = [1.0, 1.0]\nparam_hi = [2.0, 0.5]\n\n[schedule]\na = 1.0\n",
    );
    let o = kam(&["--config", bad.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for field in ["big_omega", "param_lo[1]", "schedule.a"] {
        assert!(err.contains(field), "{field} missing from: {err}");
    }
    assert!(!tmp.path().join("o").exists(), "no artifacts on a rejected config");

    let o = kam(&["--config", tmp.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn overrides_reach_the_report() {
    let tmp = TempDir::new().unwrap();
    let cfg = sigma_config(tmp.path());
    let (code, out) = run_with(tmp.path(), &cfg, "out", &["--seed", "41", "--mode", "sigma-scan"]);
    assert_eq!(code, 0);
    let r = report(&out);
    assert_eq!(r.seed, 41);
    assert_eq!(r.config.seed, 41);
    let o = kam(&["--config", cfg.to_str().unwrap(), "--mode", "orbit"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &format!("mode = \"run\"\nseed = 3\n{SYSTEM}\n[caps]\nlevels = 1\n"));
    let (c1, a) = run_with(tmp.path(), &cfg, "a", &[]);
    let (c2, b) = run_with(tmp.path(), &cfg, "b", &[]);
    assert_eq!((c1, c2), (0, 0));
    for f in ["report.json", "levels.csv", "atlas.txt", "summary.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn verify_replays_and_catches_tampering() {
    let tmp = TempDir::new().unwrap();
    let cfg = sigma_config(tmp.path());
    let (code, _) = run_with(tmp.path(), &cfg, "saved", &[]);
    assert_eq!(code, 0);
    let verify = write_config(
        tmp.path(),
        "verify.toml",
        &format!("mode = \"verify\"\n{SYSTEM}\n[verify]\nreport = \"saved/report.json\"\n"),
    );
    let (code, out) = run_with(tmp.path(), &verify, "check", &[]);
    assert_eq!(code, 0, "{}", fs::read_to_string(out.join("summary.txt")).unwrap());

    // A hand-edited verdict no longer matches its own numbers or the replay.
    let path = tmp.path().join("saved/report.json");
    let mut r = report(&tmp.path().join("saved"));
    r.checks[0].value = Some(1.0);
    fs::write(&path, r.to_json()).unwrap();
    let (code, out) = run_with(tmp.path(), &verify, "check2", &[]);
    assert_eq!(code, 4);
    let v = report(&out);
    let failed: Vec<&str> = v.hard_failures().iter().map(|c| c.name.as_str()).collect();
    assert!(failed.contains(&"saved_verdicts_inconsistent") && failed.contains(&"replay_differs"), "{failed:?}");

    fs::remove_file(&path).unwrap();
    let (code, _) = run_with(tmp.path(), &verify, "check3", &[]);
    assert_eq!(code, 1);
}
