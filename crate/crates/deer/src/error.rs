//! Crate-wide error type.
//!
//! Every error carries one of four machine-parseable categories
//! (`config | data | compat | numeric`) which the CLI prints on failure.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeerError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown or invalid domain: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("incompatible artifacts: {0}")]
    Compat(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DeerError {
    /// CLI error category for exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            DeerError::Shape(_) | DeerError::Config(_) | DeerError::Contract(_) => "config",
            DeerError::Domain(_)
            | DeerError::Data(_)
            | DeerError::Parse { .. }
            | DeerError::Io(_)
            | DeerError::Json(_) => "data",
            DeerError::Compat(_) => "compat",
            DeerError::Numeric(_) => "numeric",
        }
    }
}

pub type Result<T> = std::result::Result<T, DeerError>;
