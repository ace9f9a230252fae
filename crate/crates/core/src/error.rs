use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AaptError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint provenance mismatch: expected {expected}, found {found}")]
    Provenance { expected: String, found: String },
    #[error("session error: {0}")]
    Session(String),
    #[error("sample rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, AaptError>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::AaptError::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
