use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("empty parameter `{0}`")]
    EmptyParam(String),

    #[error("bucket view does not cover the buffer: {0}")]
    InvalidView(String),

    #[error("pruning ratio {0} outside [0, 1)")]
    InvalidRatio(f64),

    #[error("top-k rate {0} outside (0, 1]")]
    InvalidRate(f64),

    #[error("shape mismatch: expected {expected} elements, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("non-finite value: {0}")]
    NumericalFailure(String),

    #[error("mask digest mismatch: payload {payload:#018x}, local {local:#018x}")]
    MaskMismatch { payload: u64, local: u64 },

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("link error with peer {peer}: {reason}")]
    LinkError { peer: usize, reason: String },

    #[error("config file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("parse error on line {line}: {message}")]
    ParseError { line: usize, message: String },

    #[error("unknown key `{key}` on line {line}")]
    UnknownKey { line: usize, key: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: usize, actual: usize) -> Self {
        Error::ShapeMismatch { expected, actual }
    }

    pub(crate) fn link(peer: usize, reason: impl ToString) -> Self {
        Error::LinkError {
            peer,
            reason: reason.to_string(),
        }
    }
}
