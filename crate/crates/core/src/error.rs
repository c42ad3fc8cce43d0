//! Error type shared by every module in the crate.
//!
//! Each variant maps to one machine-parseable category; the CLI prints
//! errors as `error[<category>]: <message>` and exits nonzero.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor construction with inconsistent shape/values.
    #[error("construction: {0}")]
    Construction(String),

    /// Shape mismatch between operands.
    #[error("shape: {0}")]
    Shape(String),

    /// API misuse: consumed tape, non-scalar loss, foreign-tape tensor,
    /// non-deterministic closure handed to the gradient checker.
    #[error("contract: {0}")]
    Contract(String),

    /// Out-of-range index (token id, embedding row, class label).
    #[error("index: {0}")]
    Index(String),

    /// Invalid configuration value.
    #[error("config: {0}")]
    Config(String),

    /// Malformed corpus markup.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Malformed embedding or checkpoint file.
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    /// Well-formed input with invalid content (e.g. unknown polarity).
    #[error("validation: {0}")]
    Validation(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable category tag used as the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Construction(_) => "construction",
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Index(_) => "index",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Format { .. } => "format",
            Error::Validation(_) => "validation",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
