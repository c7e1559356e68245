use std::fmt::Display;
use std::path::Path;

use crate::config::ConfigErrors;

/// Process exit status for a failed command.
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error:\n{0}")]
    Config(#[from] ConfigErrors),
    #[error("{0}")]
    Usage(String),
    #[error("cannot use {path}: {message}")]
    Input { path: String, message: String },
    /// A check ran and failed.
    #[error("{0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] page_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn input(path: &Path, e: impl Display) -> Self {
        CliError::Input {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
            _ => EXIT_USAGE,
        }
    }
}
