use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: String, index: usize },

    #[error("vector norm {norm:e} is below {threshold:e}")]
    DegenerateNorm { norm: f64, threshold: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("index {index} out of range for {what} of size {size}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("no features for image {0}")]
    MissingFeature(String),

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error("rank deficient: requested {requested} components, attained rank {attained}")]
    RankDeficient { requested: usize, attained: usize },

    #[error("invalid {what}: {message}")]
    Invalid { what: &'static str, message: String },

    #[error("archive: {0}")]
    Archive(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(what: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            message: message.into(),
        }
    }

    pub fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
