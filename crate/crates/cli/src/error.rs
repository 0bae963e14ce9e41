use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the command-line front end, each with its exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("cannot read input {}: {message}", path.display())]
    Input { path: PathBuf, message: String },
    #[error("failed to write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed checks: {}", .0.join(", "))]
    ChecksFailed(Vec<String>),
    #[error(transparent)]
    Core(#[from] graphscan::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ChecksFailed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Input { .. } => 3,
            CliError::Output { .. } => 4,
            CliError::Core(_) => 5,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
