use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("malformed OBJ at line {line}: {msg}")]
    MalformedObj { line: usize, msg: String },

    #[error("unsupported face at line {line}: expected 3 vertices, found {count}")]
    UnsupportedFace { line: usize, count: usize },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("decimation failed: {0}")]
    Decimation(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("parameter representation mismatch: {0}")]
    Representation(String),

    #[error("missing label: {0}")]
    MissingLabel(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incompatible template: expected {expected} vertices, found {actual}")]
    IncompatibleTemplate { expected: usize, actual: usize },

    #[error("bad container format: {0}")]
    Format(String),

    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
