use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across data handling, identification, and control.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("insufficient data: {available} samples available, at least {required} required")]
    InsufficientData { required: usize, available: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("lifted data matrix is rank deficient (sigma_min/sigma_max = {ratio:.3e}); use the ridge variant")]
    RankDeficient { ratio: f64 },

    #[error("Hessian is not positive semidefinite (smallest eigenvalue {min_eigenvalue:.3e})")]
    NotConvex { min_eigenvalue: f64 },

    #[error("controller requires a basis that is affine in the future inputs")]
    NonAffineBasis,

    #[error("configuration error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
