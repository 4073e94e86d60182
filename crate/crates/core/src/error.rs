use std::path::PathBuf;

use amformer_grad::GradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: row {row}, column `{column}`: {msg}")]
    Cell {
        path: PathBuf,
        row: usize,
        column: String,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("non-finite {what} in `{param}` at step {step}")]
    NonFinite {
        what: &'static str,
        param: String,
        step: usize,
    },
    #[error("undefined metric: {0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Grad(GradError::NonFinite { .. }))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
