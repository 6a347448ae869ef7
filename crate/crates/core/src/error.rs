use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or grid shapes; the message names both shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside its legal range (non-positive temperature,
    /// zero-sized target grid, unknown config key, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input data violates a value contract (non-positive depth on a valid
    /// pixel, out-of-bounds pixel reference, ...).
    #[error("invalid data: {0}")]
    Data(String),

    /// The input is degenerate for the requested operation (zero range in a
    /// min-max normalization, zero deviation, zero variance, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An API contract was broken (backward from a non-scalar node, gradient
    /// set not matching the trainable parameters, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric quantity that must stay finite became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A file does not conform to its on-disk format.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
