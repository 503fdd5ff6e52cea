use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by any memelab module.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the attempted operation.
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A numeric operation received non-finite input.
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    /// A caller violated an operation's contract (bad index, out-of-range
    /// argument, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input exceeds a configured capacity (sequence length, region count).
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Invalid configuration. All violated fields are listed.
    #[error("invalid configuration: {}", problems.join("; "))]
    Config { problems: Vec<String> },

    /// The data cannot support the requested computation (e.g. single-class
    /// training set).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// A donor pool is too small to complete confounder picking.
    #[error("insufficient {modality} donor pool: need {needed}, have {available}")]
    InsufficientPool {
        modality: &'static str,
        needed: usize,
        available: usize,
    },

    /// An aggregation was asked to run over an empty collection.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Filesystem failure, tagged with the offending path.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not parse.
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn config(problems: Vec<String>) -> Self {
        Error::Config { problems }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
