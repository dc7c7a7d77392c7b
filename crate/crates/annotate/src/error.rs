use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image `{0}` has no manual mask")]
    MissingManualMask(String),

    /// The request is well formed but clashes with the task's state.
    #[error("conflict: {0}")]
    Conflict(String),

    #[error("invalid request: {0}")]
    Invalid(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("campaign log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },

    #[error(transparent)]
    Core(#[from] cxrinf_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
