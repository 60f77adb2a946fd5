use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    #[error("node index {index} out of range (graph has {len} nodes)")]
    InvalidNode { index: usize, len: usize },

    #[error("too many nodes for 32-bit index space: {0}")]
    IndexOverflow(usize),

    #[error("amount overflow while summing values")]
    AmountOverflow,

    #[error("insufficient negative pool: need {required}, have {available}")]
    InsufficientNegatives { required: usize, available: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    #[error("backward called before any forward computation")]
    BackwardBeforeForward,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
