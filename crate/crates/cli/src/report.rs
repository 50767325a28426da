//! Versioned JSON report, exit classes and on-disk artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};

pub const SCHEMA: &str = "kam-report/1";

/// Failure classes; the discriminant is the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitClass {
    Ok,
    Io,
    Config,
    Exclusion,
    Numeric,
}

impl ExitClass {
    pub fn code(self) -> i32 {
        match self {
            ExitClass::Ok => 0,
            ExitClass::Io => 1,
            ExitClass::Config => 2,
            ExitClass::Exclusion => 3,
            ExitClass::Numeric => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub class: ExitClass,
    pub code: i32,
    pub message: String,
}

impl Status {
    pub fn new(class: ExitClass, message: impl Into<String>) -> Self {
        Status {
            class,
            code: class.code(),
            message: message.into(),
        }
    }
}

/// A measured value against an inclusive band. Non-finite values are stored
/// as `null` and always fail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hi: Option<f64>,
    pub hard: bool,
    pub pass: bool,
}

impl Check {
    pub fn band(name: impl Into<String>, value: f64, lo: Option<f64>, hi: Option<f64>, hard: bool) -> Self {
        let value = value.is_finite().then_some(value);
        let mut c = Check {
            name: name.into(),
            value,
            lo,
            hi,
            hard,
            pass: false,
        };
        c.pass = c.evaluate();
        c
    }

    pub fn at_most(name: impl Into<String>, value: f64, hi: f64, hard: bool) -> Self {
        Self::band(name, value, None, Some(hi), hard)
    }

    pub fn at_least(name: impl Into<String>, value: f64, lo: f64, hard: bool) -> Self {
        Self::band(name, value, Some(lo), None, hard)
    }

    /// Recomputes the verdict from the stored numbers.
    pub fn evaluate(&self) -> bool {
        match self.value {
            None => false,
            Some(v) => self.lo.is_none_or(|lo| v >= lo) && self.hi.is_none_or(|hi| v <= hi),
        }
    }

    fn bound_text(&self) -> String {
        match (self.lo, self.hi) {
            (Some(a), Some(b)) => format!("in [{a:.3e}, {b:.3e}]"),
            (Some(a), None) => format!(">= {a:.3e}"),
            (None, Some(b)) => format!("<= {b:.3e}"),
            (None, None) => "finite".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub mode: Mode,
    pub seed: u64,
    pub config: RunConfig,
    pub status: Status,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    pub sidecars: Vec<String>,
    pub payload: serde_json::Value,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let r: Report = serde_json::from_str(text).map_err(|e| format!("report: {e}"))?;
        if r.schema != SCHEMA {
            return Err(format!("report schema {} is not {SCHEMA}", r.schema));
        }
        Ok(r)
    }

    pub fn hard_failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.hard && !c.pass).collect()
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "mode {} seed {}: {} (exit {})\n",
            self.mode.name(),
            self.seed,
            match self.status.class {
                ExitClass::Ok => "ok",
                ExitClass::Io => "i/o failure",
                ExitClass::Config => "configuration rejected",
                ExitClass::Exclusion => "parameter excluded",
                ExitClass::Numeric => "numeric failure",
            },
            self.status.code
        );
        if !self.status.message.is_empty() {
            s.push_str(&format!("  {}\n", self.status.message));
        }
        for c in &self.checks {
            let v = c.value.map_or("non-finite".to_string(), |v| format!("{v:.6e}"));
            s.push_str(&format!(
                "  {} {:<32} {} {}{}\n",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                v,
                c.bound_text(),
                if c.hard { "" } else { " (soft)" }
            ));
        }
        for w in &self.warnings {
            s.push_str(&format!("  warning: {w}\n"));
        }
        if !self.sidecars.is_empty() {
            s.push_str(&format!("  sidecars: {}\n", self.sidecars.join(", ")));
        }
        s
    }
}

/// A finished mode: the report plus named text artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: Report,
    pub sidecars: Vec<(String, String)>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        self.report.status.code
    }

    /// Writes `report.json`, the sidecars and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.report.to_json())?;
        for (name, body) in &self.sidecars {
            std::fs::write(dir.join(name), body)?;
        }
        std::fs::write(dir.join("summary.txt"), self.report.summary())
    }
}
