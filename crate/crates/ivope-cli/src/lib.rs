//! Experiment harness for the `ivope` estimators: configuration, single
//! experiments, ablation sweeps, hyperparameter search, and report merging.

pub mod ablation;
pub mod config;
pub mod experiment;
pub mod registry;
pub mod report;
pub mod search;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("run error (seed index {seed_index}): {source}")]
    Run {
        seed_index: usize,
        #[source]
        source: ivope::Error,
    },

    #[error("{0}")]
    Core(#[from] ivope::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("report error: {0}")]
    Report(String),

    #[error("search error: {0}")]
    Search(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    /// Machine-readable error category for the CLI's JSON output.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Run { .. } => "run",
            HarnessError::Core(_) => "core",
            HarnessError::Io(_) => "io",
            HarnessError::Report(_) => "report",
            HarnessError::Search(_) => "search",
        }
    }
}
