//! Front end for `latte-core`: run configs, checkpoints on disk, the
//! training loop and the `latte` subcommands.

pub mod analyze;
pub mod config;
pub mod error;
pub mod optim;
pub mod sample;
pub mod train;

use latte_core::verify;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

pub const MODE_ENV: &str = "LATTE_TEST_MODE";

/// Float width for a run, chosen by `LATTE_TEST_MODE` (`f32` default).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumericMode {
    F32,
    F64,
}

impl NumericMode {
    pub fn from_env() -> CliResult<Self> {
        match std::env::var(MODE_ENV) {
            Err(_) => Ok(NumericMode::F32),
            Ok(v) => match v.as_str() {
                "" | "f32" => Ok(NumericMode::F32),
                "f64" => Ok(NumericMode::F64),
                other => Err(CliError::Config(format!("{MODE_ENV}={other}: expected f32 or f64"))),
            },
        }
    }
}

/// Runs the verification suites, printing one line per case.
pub fn run_verify(filter: Option<&str>, out: &mut impl std::io::Write) -> CliResult<verify::Report> {
    let report = verify::run(filter).map_err(|e| CliError::Config(e.to_string()))?;
    for c in &report.cases {
        let mark = if c.passed { "ok  " } else { "FAIL" };
        writeln!(out, "{mark} {}/{} {}", c.suite, c.name, c.detail)?;
    }
    let failed: Vec<_> = report.failures().collect();
    writeln!(out, "{} cases, {} failed", report.cases.len(), failed.len())?;
    if !failed.is_empty() {
        return Err(CliError::Verify(failed.iter().map(|c| format!("{}/{}", c.suite, c.name)).collect()));
    }
    Ok(report)
}
