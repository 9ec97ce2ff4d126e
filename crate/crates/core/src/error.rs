use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A model's noise covariances or dimensions are inconsistent.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A matrix that must be positive definite could not be factorized.
    #[error("singular matrix at step {step}: {what}")]
    Singular { step: usize, what: String },

    /// Cholesky factorization broke down; `pivot` is the zero-based index of
    /// the first non-positive pivot.
    #[error("factorization failed at pivot {pivot}")]
    Factorization { pivot: usize },

    #[error("invalid lattice construction: {0}")]
    Lattice(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A NaN or infinity showed up in a filter run or during training.
    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A pipeline stage failed; wraps the underlying error with the stage name.
    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Tags the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}
