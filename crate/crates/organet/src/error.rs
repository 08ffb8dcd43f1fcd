//! Crate-wide error type with stable process exit codes.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad argument to an operation.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Inconsistent or unsupported configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input file does not exist.
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    /// A file exists but cannot be decoded.
    #[error("cannot decode {path}: {detail}")]
    Decode { path: PathBuf, detail: String },

    /// Paired inputs disagree on shape.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Dataset-level problem (empty set, bad layout, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure (NaN loss, divergence).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Checkpoint serialization or compatibility problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code contract: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
