//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate label name {0:?}")]
    DuplicateLabel(String),

    #[error("unknown label name {0:?}")]
    UnknownLabel(String),

    #[error("vector length {got} does not match label count {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{0}")]
    InvalidInput(String),

    #[error("malformed EAF: {0}")]
    Eaf(String),

    #[error("{path}:{line}: {msg}")]
    Record {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("no JSON {expected} found in response")]
    Unparseable { expected: &'static str },

    #[error("missing slot {0:?} for prompt template")]
    MissingSlot(&'static str),

    #[error("missing artifact {artifact}: {hint}")]
    MissingArtifact { artifact: String, hint: String },

    #[error("encoder {id}: {msg}")]
    Encoder { id: String, msg: String },

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
