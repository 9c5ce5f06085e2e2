use thiserror::Error;

/// Errors raised across the training and verification engine.
#[derive(Debug, Error)]
pub enum AsmilError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (bag `{bag_id}`)")]
    NonFiniteLoss {
        bag_id: String,
        epoch: usize,
        step: usize,
    },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AsmilError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        AsmilError::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        AsmilError::Domain(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        AsmilError::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        AsmilError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, AsmilError>;
