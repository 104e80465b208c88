//! Command-line pipeline: synthetic data, registration, training,
//! evaluation and single-pair detection.

pub mod commands;
pub mod config;

pub use commands::{cmd_detect, cmd_eval, cmd_register, cmd_synth, cmd_train};
pub use config::{Overrides, PipelineConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Pipeline(#[from] fusedet::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 usage, 2 data, 3 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Pipeline(fusedet::Error::Divergence { .. }) => 3,
            _ => 2,
        }
    }
}
