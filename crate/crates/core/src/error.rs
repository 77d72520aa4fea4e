use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, BlessError>;

#[derive(Debug, Error)]
pub enum BlessError {
    #[error("no in-mask voxels")]
    EmptyMask,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("precision not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl BlessError {
    pub fn not_pd(context: impl Into<String>) -> Self {
        BlessError::NotPositiveDefinite {
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BlessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        BlessError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Numeric failures (non-PD precisions, divergent fits) as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            BlessError::NotPositiveDefinite { .. } | BlessError::Numeric(_)
        )
    }
}
