use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("class `{class}` has {have} images, protocol {protocol} needs {need}")]
    ProtocolViolation {
        class: String,
        protocol: String,
        have: usize,
        need: usize,
    },

    #[error("checkpoint field `{field}`: {msg}")]
    Checkpoint { field: String, msg: String },

    #[error("model/checkpoint mismatch on tensor `{name}`: {msg}")]
    ParamMismatch { name: String, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("metrics sink: {0}")]
    Sink(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::ProtocolViolation { .. }
                | Error::Config(_)
                | Error::ParamMismatch { .. }
                | Error::ShapeMismatch { .. }
        )
    }
}
