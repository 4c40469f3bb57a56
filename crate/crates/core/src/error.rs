use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the calibration library.
#[derive(Debug, Error)]
pub enum KcalError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("size mismatch: expected {expected} bytes of payload, found {found}")]
    SizeMismatch { expected: u64, found: u64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite objective value {value} at {at}")]
    NonFiniteObjective { at: f64, value: f64 },

    #[error("non-finite training loss {loss} in batch with seed {batch_seed}")]
    NonFiniteLoss { loss: f64, batch_seed: u64 },
}

impl KcalError {
    /// Numerical failures, as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            KcalError::NonFiniteObjective { .. } | KcalError::NonFiniteLoss { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KcalError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, KcalError>;
