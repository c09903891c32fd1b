use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while decoding IDX containers.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic number 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated header: need {needed} bytes, file has {available}")]
    TruncatedHeader { needed: usize, available: usize },
    #[error("truncated payload: header promises {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("count mismatch: header declares {declared} items but payload holds {actual}")]
    CountMismatch { declared: usize, actual: usize },
    #[error("label {value} at index {index} is out of range [0, {classes})")]
    LabelOutOfRange { index: usize, value: u8, classes: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },
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
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
