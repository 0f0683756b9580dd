//! Declarative experiment runner: parses flat experiment documents, runs
//! teacher training, distillation, sweeps and ablations, and writes
//! metrics, result summaries, curves and feature heatmaps.

pub mod config;
pub mod heatmap;
pub mod report;
pub mod runner;

pub use config::{DatasetSource, ExperimentConfig, Task};
pub use report::{compare, RunResult, COMPARE_HEADER};
pub use runner::{run, RunOptions, RunOutcome};

/// Process exit code for configuration errors.
pub const EXIT_CONFIG: u8 = 2;
/// Process exit code for failures after the config was accepted.
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<mgd_core::Error> for CliError {
    fn from(e: mgd_core::Error) -> Self {
        CliError::runtime(e)
    }
}
