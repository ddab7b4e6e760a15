//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/grid shapes do not match the operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input data violates a domain precondition (e.g. non-positive amplitude).
    #[error("domain error: {0}")]
    Domain(String),

    /// A transform was asked to invert a value outside its attainable range.
    #[error("range error: {0}")]
    Range(String),

    /// A scalar parameter is out of its valid range.
    #[error("parameter error: {0}")]
    Param(String),

    /// A configuration file or value could not be parsed.
    #[error("config error: {0}")]
    Config(String),

    /// Numeric failure during computation (non-finite values, degenerate samples).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The transform fit could not locate a usable minimum.
    #[error("fit failure: {0}")]
    Fit(String),

    /// A serialized artifact (checkpoint, raster, spec file) is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
