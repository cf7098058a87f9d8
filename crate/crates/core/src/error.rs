use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema version mismatch: file has {found:?}, reader supports {expected:?}")]
    SchemaVersion { found: String, expected: String },

    #[error("truncated array data for sample `{sample}`: {detail}")]
    Truncated { sample: String, detail: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("zero-norm embedding row {row} in {matrix}")]
    ZeroNorm { matrix: &'static str, row: usize },

    #[error("non-finite loss component `{component}`")]
    NonFinite { component: &'static str },

    #[error("training diverged at step {step}: component `{component}` is not finite (batch ids {batch_ids:?})")]
    Diverged {
        step: usize,
        component: &'static str,
        batch_ids: Vec<String>,
    },

    #[error("path not found: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
