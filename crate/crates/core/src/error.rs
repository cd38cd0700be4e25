use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("join error: orphan patient ids {orphans:?}")]
    Join { orphans: Vec<String> },

    #[error("parse error in {file} at row {row}, column `{column}`: {detail}")]
    Parse {
        file: String,
        row: usize,
        column: String,
        detail: String,
    },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("loss function is not reproducible: {0}")]
    Reproducibility(String),

    #[error("numerical failure at epoch {epoch}: {term} = {value}")]
    Numerical {
        epoch: usize,
        term: String,
        value: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
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

    /// True for failures caused by the numbers themselves rather than by the
    /// caller's inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Numerical { .. }
                | Error::Reproducibility(_)
                | Error::Domain { .. }
        )
    }
}
