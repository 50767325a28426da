use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use kam_cli::{execute, load_config, ConfigError, ExitClass, Mode, Overrides};

/// Config-driven KAM iteration, certificate audits and stability checks.
#[derive(Parser, Debug)]
#[command(name = "kam", version)]
struct Args {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Directory for report.json, CSV sidecars and summary.txt.
    #[arg(long, default_value = "kam-out")]
    out: PathBuf,
    /// Maximum number of KAM steps.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// run | atlas | greens | sigma-scan | stability | verify
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Treat level invariants as hard failures (true) or warnings (false).
    #[arg(long)]
    strict: Option<bool>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("unknown mode {s:?}"))
}

fn main() -> ExitCode {
    let args = Args::parse();
    match drive(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("kam: {e:#}");
            let class = match e.downcast_ref::<ConfigError>() {
                Some(ConfigError::Io { .. }) | None => ExitClass::Io,
                Some(_) => ExitClass::Config,
            };
            ExitCode::from(class.code() as u8)
        }
    }
}

fn drive(args: &Args) -> anyhow::Result<i32> {
    let over = Overrides {
        mode: args.mode,
        seed: args.seed,
        levels: args.levels,
        strict: args.strict,
    };
    let cfg = load_config(&args.config, &over)?;
    let base = args
        .config
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let outcome = execute(&cfg, &base);
    outcome
        .write(&args.out)
        .with_context(|| format!("writing artifacts to {}", args.out.display()))?;
    print!("{}", outcome.report.summary());
    Ok(outcome.exit_code())
}
