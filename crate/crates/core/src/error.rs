use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report. The variant is the error category
/// surfaced by the CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("batch-size error: {0}")]
    BatchSize(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("file error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::BatchSize(_) => "batch-size",
            Error::Validation(_) => "validation",
            Error::Usage(_) => "usage",
            Error::Pairing(_) => "pairing",
            Error::Training { .. } => "training",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Io(_) => "file",
        }
    }

    /// Process exit code for the CLI; 0 is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Parse { .. } => 3,
            Error::Config(_) => 4,
            Error::Io(_) => 5,
            Error::Format(_) => 6,
            Error::Dimension(_) | Error::BatchSize(_) => 7,
            Error::Validation(_) | Error::Pairing(_) => 8,
            Error::Training { .. } => 9,
        }
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
