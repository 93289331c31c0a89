use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] spt_core::Error),

    #[error("cannot parse config {0}")]
    Parse(String),

    /// Bad command-line usage (exit code 2).
    #[error("usage: {0}")]
    Usage(String),

    /// A required artifact from an earlier command is absent.
    #[error("{what} not found at {path}; {hint}")]
    Missing { what: &'static str, path: PathBuf, hint: &'static str },

    /// Artifacts produced under different settings.
    #[error("refusing to run: {0}")]
    Mismatch(String),

    /// The invariant battery reported failures.
    #[error("{0} invariant check(s) failed")]
    Invariant(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
