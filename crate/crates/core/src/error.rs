use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid restriction: {0}")]
    InvalidRestriction(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("invalid permutation matrix: {0}")]
    InvalidMatrix(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("key does not match image: {0}")]
    KeyMismatch(String),

    #[error("key fingerprint mismatch: the supplied key did not produce this image")]
    FingerprintMismatch,

    #[error("malformed CIFAR-10 data in {file}: {reason}")]
    Cifar { file: String, reason: String },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
