use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the detection pipeline.
#[derive(Debug, Error)]
pub enum NtlError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error: {0}")]
    RawIo(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("duplicate customer id `{0}` in metadata")]
    DuplicateCustomer(String),

    #[error("customer `{customer}`: timestamp at telemetry row {row} goes backwards")]
    NonMonotoneTimestamp { customer: String, row: usize },

    #[error("invalid metadata for customer `{customer}`: {reason}")]
    InvalidMeta { customer: String, reason: String },

    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("parameter sets disagree: {0}")]
    ParamMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("training diverged at step {step}: non-finite loss on batch samples {sample_ids:?}")]
    Divergence { step: usize, sample_ids: Vec<String> },

    #[error("{0}")]
    Undefined(String),
}

impl NtlError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NtlError::Io { path: path.into(), source }
    }

    pub fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        NtlError::Shape { layer: layer.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, NtlError>;
