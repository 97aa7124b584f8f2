use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("incompatible version: found {found}, expected {expected}")]
    Incompatible { found: u32, expected: u32 },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("rank deficiency: {0}")]
    Rank(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("fingerprint mismatch: index built by {index}, checkpoint is {checkpoint}")]
    Fingerprint { index: String, checkpoint: String },

    #[error("refusing to overwrite existing output {0} (pass --force)")]
    Exists(PathBuf),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn argument(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
