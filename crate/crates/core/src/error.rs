use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: String, found: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("code {code} out of range for {dtype}")]
    CodeOutOfRange { code: i64, dtype: String },

    #[error("invalid error model: {0}")]
    InvalidModel(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("invalid operating point: {0}")]
    InvalidOperatingPoint(String),

    #[error("unknown partition {0}")]
    UnknownPartition(u32),

    #[error("empty trace")]
    EmptyTrace,

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite { .. } => "non_finite",
            Error::DtypeMismatch { .. } => "dtype_mismatch",
            Error::Shape(_) => "shape",
            Error::CodeOutOfRange { .. } => "code_out_of_range",
            Error::InvalidModel(_) => "invalid_model",
            Error::Layout(_) => "layout",
            Error::InvalidOperatingPoint(_) => "invalid_operating_point",
            Error::UnknownPartition(_) => "unknown_partition",
            Error::EmptyTrace => "empty_trace",
            Error::Diverged { .. } => "diverged",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
