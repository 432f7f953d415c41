//! Configuration, orchestration and file output for the `bintern` binary.

pub mod commands;
pub mod config;
pub mod output;

use bintern::Error;

pub use commands::{run_constants, run_kernels, run_solve, run_verify, SolveOptions, SolveSummary, VerifyReport};
pub use config::{ConfigErrors, RunConfig};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const CONFIG: i32 = 2;
    /// Certificate, smallness, beginning-condition or monotonicity failure.
    pub const CERTIFICATE: i32 = 3;
    pub const NOT_CONVERGED: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigErrors),
    /// Config is well formed but cannot be set up (tables, grid, kernel).
    #[error("setup: {0}")]
    Setup(String),
    #[error("resume refused: {0}")]
    ResumeMismatch(String),
    #[error("{0}")]
    Core(#[from] Error),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Setup(_) | CliError::ResumeMismatch(_) => exit::CONFIG,
            CliError::Io(_) => exit::IO,
            CliError::Core(e) => match e {
                Error::SmallnessFailure { .. } | Error::BeginningCondition(_) | Error::MonotonicityViolation { .. } => exit::CERTIFICATE,
                _ => exit::CONFIG,
            },
        }
    }
}
