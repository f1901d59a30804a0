//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the policy stack.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("gradient error: {0}")]
    Gradient(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("degenerate normalization statistics: {0}")]
    DegenerateStats(String),

    #[error("empty mask: total weight {total} is not above {eps}")]
    EmptyMask { total: f64, eps: f64 },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("region proposal error: {0}")]
    Proposal(String),

    #[error("visual prompt error: {0}")]
    Prompt(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than an internal or
    /// environmental failure.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Gradient(_) | Error::Backend(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
