use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pruning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} blocks, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("arithmetic overflow while computing {0}")]
    Overflow(&'static str),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("incomplete trace: {0}")]
    Coverage(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("missing {what} at {}: run `{step}` first", path.display())]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        step: &'static str,
    },

    #[error("stale {what}: {msg}")]
    Stale { what: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
