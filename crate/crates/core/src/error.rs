//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any part of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A value is outside its documented domain (quality factor, caption length, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor or image dimensions do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A non-finite value surfaced where the contract requires finite numbers.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Dataset or vocabulary loading failed.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint serialization or deserialization failed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A checkpoint was produced under a different configuration.
    #[error("config mismatch: expected config hash {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
