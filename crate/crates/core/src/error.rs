use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("empty support: {0} has no valid pixels")]
    EmptySupport(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("training diverged: non-finite value in `{component}`")]
    Divergence { component: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },

    #[error("{path}: unsupported bit depth ({detail})")]
    UnsupportedBitDepth { path: PathBuf, detail: String },

    #[error("{path}: corrupt data ({detail})")]
    CorruptData { path: PathBuf, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error("manifest error: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path }
        } else {
            Error::Io { path, source }
        }
    }

    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Io { .. }
            | Error::MissingFile { .. }
            | Error::UnsupportedBitDepth { .. }
            | Error::CorruptData { .. }
            | Error::Format(_)
            | Error::Version(_)
            | Error::Manifest(_) => ErrorKind::Data,
            Error::Dimension(_)
            | Error::EmptySupport(_)
            | Error::Contract(_)
            | Error::Divergence { .. } => ErrorKind::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}
