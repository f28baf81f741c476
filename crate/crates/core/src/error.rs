use std::path::PathBuf;

/// Errors produced by the detection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: unrecognized format", path.display())]
    UnrecognizedFormat { path: PathBuf },

    #[error("{}: payload length mismatch (expected {expected} bytes, found {actual})", path.display())]
    PayloadLength {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{}: malformed header at byte offset {offset}: {message}", path.display())]
    HeaderParse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("model format error: {0}")]
    ModelFormat(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("activation cache does not belong to these parameters")]
    StaleCache,

    #[error("non-finite loss at iteration {iteration}: {breakdown}")]
    Diverged { iteration: usize, breakdown: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
