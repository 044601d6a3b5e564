use std::path::PathBuf;

/// Errors produced by the modelling, training and evaluation routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("numerical error in {what} at index {index}: {detail}")]
    Numerical {
        what: &'static str,
        index: usize,
        detail: String,
    },

    #[error("empty sequence")]
    EmptySequence,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training diverged at epoch {epoch}: mean nll {nll}")]
    Diverged { epoch: usize, nll: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::Format { .. } => 2,
            Error::Shape(_) | Error::Index { .. } | Error::EmptySequence => 3,
            Error::Numerical { .. } | Error::Diverged { .. } => 4,
            Error::Io { .. } => 5,
            Error::Eval(_) => 6,
        }
    }
}
