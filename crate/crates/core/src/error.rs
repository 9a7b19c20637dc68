use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid tensor shape {0}: every dimension must be at least 1")]
    EmptyDim(Shape),

    #[error("tensor data length {len} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape,
        len: usize,
        expected: usize,
    },

    #[error("{what} {value} is not divisible by {divisor}")]
    Divisibility {
        what: String,
        value: usize,
        divisor: usize,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("unknown gradient-check op `{0}`")]
    UnknownOp(String),

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("weight file does not match the network: {reason}: {names:?}")]
    ParamMismatch { reason: String, names: Vec<String> },

    #[error("tape is stale or belongs to a different forward pass: {0}")]
    StaleTape(String),

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error("mask is not binary: found value {0}")]
    NonBinary(f64),

    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
