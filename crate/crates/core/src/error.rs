use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("size error: {0}")]
    Size(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("frame {frame} has zero total weight")]
    Coverage { frame: usize },

    #[error("index {index} out of padded range {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("filter symmetry error: imaginary residue {residue:e} exceeds {tolerance:e}")]
    FilterSymmetry { residue: f64, tolerance: f64 },

    #[error("denoiser error (clip {clip_id}, t={t}): {message}")]
    Denoiser { clip_id: usize, t: usize, message: String },

    #[error("anchor ordering error: {0}")]
    Ordering(String),

    #[error("numeric error at {context}: {message}")]
    Numeric { context: String, message: String },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("step {step} (t={t}): {source}")]
    Step {
        step: usize,
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::Shape { expected: format!("{expected:?}"), actual: format!("{actual:?}") }
    }

    pub(crate) fn invalid(key: &str, message: impl Into<String>) -> Self {
        Error::InvalidValue { key: key.to_string(), message: message.into() }
    }

    /// Short machine-readable tag, used in structured CLI output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Shape { .. } => "shape",
            Error::Size(_) => "size",
            Error::NonFinite(_) => "non_finite",
            Error::Schedule(_) => "schedule",
            Error::Config(_) | Error::InvalidValue { .. } => "config",
            Error::Parse { .. } => "parse",
            Error::Coverage { .. } => "coverage",
            Error::IndexOutOfRange { .. } => "index",
            Error::FilterSymmetry { .. } => "filter_symmetry",
            Error::Denoiser { .. } => "denoiser",
            Error::Ordering(_) => "ordering",
            Error::Numeric { .. } => "numeric",
            Error::Format { .. } => "format",
            Error::Protocol(_) => "protocol",
            Error::Step { source, .. } => source.kind(),
            Error::Io(_) => "io",
        }
    }
}
