//! Operator surface for the coprompt library: dataset generation,
//! pre-training, fine-tuning, evaluation, ablations and sweeps, each driven
//! by one JSON [`config::RunConfig`] and writing into its own run directory.

pub mod ablation;
pub mod commands;
pub mod config;

/// Process exit codes.
pub const EXIT_NUMERIC: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] coprompt::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }
}
