//! Crate-wide error type and process exit-code mapping.

use std::fmt;

/// Unified error for all pipeline stages.
///
/// Exit codes follow the command-line contract: 0 ok, 2 validation,
/// 3 numeric failure, 4 artifact mismatch.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration, argument, or input data.
    Validation(String),
    /// Tensor shape mismatch; names the offending axis.
    Shape { context: String, axis: usize, expected: usize, got: usize },
    /// NaN, non-finite value, or other numeric breakdown.
    Numeric(String),
    /// Checkpoint/dataset does not match what the command expects.
    ArtifactMismatch(String),
    /// Filesystem or serialization failure.
    Io(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn mismatch(msg: impl Into<String>) -> Self {
        Error::ArtifactMismatch(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Shape { .. } => 2,
            Error::Numeric(_) => 3,
            Error::ArtifactMismatch(_) => 4,
            Error::Io(_) => 2,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Shape { context, axis, expected, got } => write!(
                f,
                "shape mismatch in {context}: axis {axis} expected {expected}, got {got}"
            ),
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Error::ArtifactMismatch(msg) => write!(f, "artifact mismatch: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
