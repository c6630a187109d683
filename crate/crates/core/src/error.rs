use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variants are grouped by failure class; the CLI maps each class to its own
/// exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("composition error: {0}")]
    Composition(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("training diverged at {location}: loss {loss}")]
    Divergence { location: String, loss: f64 },

    #[error("protocol aborted: {0}")]
    Protocol(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn composition(msg: impl Into<String>) -> Self {
        Error::Composition(msg.into())
    }

    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI, one per failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Domain(_) => 3,
            Error::Config(_) | Error::Composition(_) => 4,
            Error::Format { .. } => 5,
            Error::Divergence { .. } => 6,
            Error::Protocol(_) => 7,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => 8,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
