//! Library side of the `neurocontrol` binary: configuration, output handling
//! and the five commands.

pub mod commands;
pub mod config;
mod output;

pub use config::{Overrides, RunConfig};
pub use output::OutputDir;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent configuration. Exit code 2.
    #[error("configuration error: {0}")]
    Config(String),

    /// A solver, training or integration failure. Exit code 3.
    #[error(transparent)]
    Run(#[from] neurocontrol::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(neurocontrol::Error::Checkpoint(_)) => 2,
            CliError::Run(neurocontrol::Error::Config(_)) => 2,
            CliError::Run(_) => 3,
            CliError::Io { .. } => 1,
        }
    }
}

/// Relative excess of the feedback objective over the open-loop one.
pub fn suboptimality(j_feedback: f64, j_openloop: f64) -> f64 {
    (j_feedback - j_openloop) / j_openloop.abs()
}
