use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DanError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor shape {shape:?} does not describe {len} values")]
    BadLayout { shape: Vec<usize>, len: usize },

    #[error("softmax over an empty support (every entry masked)")]
    EmptySupport,

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),

    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("{path}: unsupported format version {found:?} (expected {expected:?})")]
    VersionMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("{path}: malformed record {record}: {reason}")]
    MalformedRecord {
        path: PathBuf,
        record: usize,
        reason: String,
    },

    #[error("{path}: checksum mismatch in record {record}")]
    Checksum { path: PathBuf, record: usize },

    #[error("{path}: malformed file: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("kind mismatch: expected {expected}, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: String,
    },

    #[error("{0} not found")]
    NotFound(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DanError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DanError::Io {
            path: path.into(),
            source,
        }
    }
}
