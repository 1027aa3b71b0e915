use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents.
    #[error("dimension error: {0}")]
    Shape(String),

    /// An invalid configuration value; the message names the offending field.
    #[error("config error: {field}: {reason}")]
    Config { field: String, reason: String },

    /// The API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

/// Parse errors for the binary containers (feature files and checkpoints).
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    BadVersion(u32),

    #[error("truncated payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("non-finite value in record {record} at element {index}")]
    NonFinite { record: usize, index: usize },

    #[error("record {record}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        record: usize,
        label: u32,
        num_classes: u32,
    },

    #[error("record {record}: zero-sized dimension (L={layers}, T={frames}, C={channels})")]
    EmptyDimension {
        record: usize,
        layers: usize,
        frames: usize,
        channels: usize,
    },

    #[error("{0} trailing bytes after last record")]
    TrailingBytes(usize),

    #[error("malformed field: {0}")]
    Malformed(String),
}
