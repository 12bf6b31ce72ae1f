use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate marginal: {0}")]
    DegenerateMarginal(String),

    #[error("invalid cost matrix: {0}")]
    InvalidCost(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("config mismatch: {0}")]
    Config(String),

    #[error("missing probe: {0}")]
    MissingProbe(String),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt payload: {0}")]
    Corruption(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("invalid experiment spec at {path}: {message}")]
    Spec { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than by a bug or the
    /// environment.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::TrainingDiverged { .. })
    }
}
