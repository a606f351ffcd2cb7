//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration document or parameter is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's preconditions (bad index, shape
    /// mismatch, non-finite input, unnormalized distribution, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numerical failure mid-computation (NaN loss, degenerate fit).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Not enough data points for the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems,
    /// 3 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Numerical(_) | Error::InsufficientData(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
