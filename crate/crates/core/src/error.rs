use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The structural model violates acyclicity or an index invariant.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Random model generation could not find a valid response node.
    #[error("model generation failed after {attempts} attempts")]
    Generation { attempts: usize },

    /// A caller-side precondition was not met (sizes, counts, parameter ranges).
    #[error("configuration error: {0}")]
    Config(String),

    /// A design that must have full column rank does not.
    #[error("singular design: columns {columns:?} are linearly dependent on the others")]
    Singular { columns: Vec<usize> },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{context}: {source}")]
    Io {
        context: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {context}: {source}")]
    Csv {
        context: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// Too many datasets failed during an experiment run.
    #[error("{failed} of {total} datasets failed (limit is 10%)")]
    FailureThreshold { failed: usize, total: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            context: path.into(),
            source,
        }
    }
}
