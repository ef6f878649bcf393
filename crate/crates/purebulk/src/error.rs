//! Crate-wide error type.
//!
//! Validation problems (bad shapes, malformed files, out-of-range options)
//! and numerical failures (non-finite values, non-convergence) are kept
//! apart so the CLI can map them to distinct exit codes.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A value that must be finite was NaN or infinite. The message names
    /// the operation or layer that produced it.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Numerical failure past a documented cap (divergence, degenerate
    /// batches, monotone likelihood).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI maps this error to: 1 for validation and i/o
    /// problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_split_validation_from_numerics() {
        assert_eq!(Error::InvalidInput("x".into()).exit_code(), 1);
        assert_eq!(Error::Parse("x".into()).exit_code(), 1);
        assert_eq!(Error::NonFinite("loss".into()).exit_code(), 2);
        assert_eq!(Error::Numerical("diverged".into()).exit_code(), 2);
    }
}
