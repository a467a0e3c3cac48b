use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid pose: {0}")]
    Pose(String),

    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("empty frame: {0}")]
    EmptyFrame(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in machine-readable summaries.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Pose(_) => "pose",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "argument",
            Error::Integrity(_) => "integrity",
            Error::EmptyFrame(_) => "empty-frame",
            Error::Numeric(_) => "numeric",
            Error::Autodiff(_) => "autodiff",
            Error::Io { .. } => "io",
        }
    }
}
