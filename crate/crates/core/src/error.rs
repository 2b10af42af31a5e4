use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected} but got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: Shape4,
        got: Shape4,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("loss must be a 1x1x1x1 scalar, got {0}")]
    NotScalar(Shape4),

    #[error("tape node {node} consumes node {input}, which does not precede it")]
    Cycle { node: usize, input: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint {path}: bad magic bytes")]
    BadMagic { path: PathBuf },

    #[error("checkpoint {path}: format version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("checkpoint {path}: truncated while reading {what}")]
    Truncated { path: PathBuf, what: String },

    #[error("checkpoint parameter mismatch at `{name}`: {detail}")]
    ParamMismatch { name: String, detail: String },

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
