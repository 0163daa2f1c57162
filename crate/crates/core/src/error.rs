use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, range, finiteness).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("not implemented: {0}")]
    Unimplemented(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Returns a contract violation from the enclosing function when `cond` is false.
macro_rules! ensure {
    ($cond:expr, $op:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::contract($op, format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
