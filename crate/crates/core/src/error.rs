use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SspError {
    /// An operation received operands violating its shape contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("geometry violation: r * D_i != D_s (D_i={imaging_depth}, D_s={target_depth}, r={ratio})")]
    Geometry { imaging_depth: usize, target_depth: usize, ratio: usize },

    #[error("task label {label} out of range for {task_count} tasks")]
    Label { label: usize, task_count: usize },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("output directory {} is not empty (use --force)", .0.display())]
    OutputExists(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SspError {
    pub(crate) fn contract(op: &str, detail: impl Into<String>) -> Self {
        SspError::Contract { op: op.to_string(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, SspError>;
