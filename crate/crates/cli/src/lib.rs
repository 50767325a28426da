//! Configuration, mode dispatch and report emission for the `kam` batch runner.

pub mod config;
pub mod dispatch;
pub mod harness;
pub mod report;

pub use config::{load_config, parse_config, ConfigError, Mode, Overrides, RunConfig};
pub use dispatch::execute;
pub use report::{Check, ExitClass, Outcome, Report, SCHEMA};
