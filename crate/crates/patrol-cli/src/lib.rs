//! Batch front-end for the patrol library: run-spec ingestion, optimization
//! and evaluation subcommands, and artifact export (strategy CSVs, run
//! records, summaries, heatmaps).

pub mod commands;
pub mod format;
pub mod runspec;

use std::fmt;

/// Command failures carry the process exit code dictated by the interface
/// contract: 2 for spec/validation problems, 3 for invalid strategy
/// matrices, 4 for unwritable outputs.
#[derive(Debug)]
pub enum CliError {
    Spec(String),
    InvalidMatrix(String),
    Unwritable(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Spec(_) => 2,
            CliError::InvalidMatrix(_) => 3,
            CliError::Unwritable(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Spec(m) => write!(f, "error: {m}"),
            CliError::InvalidMatrix(m) => write!(f, "error: invalid strategy: {m}"),
            CliError::Unwritable(m) => write!(f, "error: cannot write output: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<patrol::Error> for CliError {
    fn from(e: patrol::Error) -> Self {
        CliError::Spec(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
