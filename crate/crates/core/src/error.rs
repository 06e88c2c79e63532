use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tape error: {0}")]
    Tape(&'static str),

    #[error("training diverged at epoch {epoch} ({phase}): loss = {loss}")]
    Diverged {
        epoch: usize,
        phase: &'static str,
        loss: f64,
    },

    #[error("model is not packable: {0}")]
    NotPackable(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("invalid config value for `{key}`: {msg}")]
    Validation { key: &'static str, msg: String },

    #[error("container: {0}")]
    Container(String),

    #[error("container section `{section}` failed its checksum")]
    Checksum { section: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Config { .. } | Error::Validation { .. } | Error::NotPackable(_)
        )
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
