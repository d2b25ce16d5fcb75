//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/volume shape disagreement, with both offending values named.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Invalid configuration value or unknown configuration key.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// File-format problem: malformed header, truncated data, unknown dtype.
    #[error("format error: {0}")]
    Format(String),
    /// Inconsistent or unusable input data.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite values surfaced where finite math is required.
    #[error("numerical error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
