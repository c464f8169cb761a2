use std::fmt;

use thiserror::Error;

/// Spatial or channel axis of a [`crate::Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Channel,
    Height,
    Width,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::Channel => f.write_str("channel"),
            Axis::Height => f.write_str("height"),
            Axis::Width => f.write_str("width"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{axis} of size {size} is not divisible by {divisor}")]
    Dimension {
        axis: Axis,
        size: usize,
        divisor: usize,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unsupported maxval {0} (must be 1..=255)")]
    UnsupportedMaxval(u32),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("bad magic: {0:?}")]
    BadMagic([u8; 4]),

    #[error("dimensions overflow: {0}")]
    DimOverflow(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serialize(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl fmt::Display, actual: impl fmt::Display) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialize(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialize(e.to_string())
    }
}
