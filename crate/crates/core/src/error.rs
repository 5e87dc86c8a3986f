use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("dimension mismatch: {context}: {left:?} vs {right:?}")]
    Dimension {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("int32 overflow in {context} at output index {index}")]
    Overflow { context: String, index: usize },

    #[error("cannot fold batch norm node `{node}`: {reason}")]
    Unfoldable { node: String, reason: String },

    #[error("unsupported operation at node `{node}`: {reason}")]
    UnsupportedOp { node: String, reason: String },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown node kind `{kind}` for node `{node}`")]
    UnknownNodeKind { node: String, kind: String },

    #[error("dangling reference `{reference}` from `{from}`")]
    DanglingRef { from: String, reference: String },

    #[error("tensor `{name}` shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{name}` byte range {offset}..{end} exceeds blob of {available} bytes")]
    BlobLength {
        name: String,
        offset: u64,
        end: u64,
        available: u64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("tensor `{name}` value {value} at index {index} outside [{lo}, {hi}]")]
    Range {
        name: String,
        index: usize,
        value: i64,
        lo: i64,
        hi: i64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
