use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible generator spec: {0}")]
    Infeasible(String),

    #[error("{0} out of range")]
    OutOfRange(String),

    #[error("block format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("digest mismatch for {path}: expected {expected}, found {found}")]
    Digest {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("incomplete model: missing batches {missing:?}")]
    Incomplete { missing: Vec<usize> },

    #[error("manifest in {dir} does not match this run: {msg}")]
    ManifestMismatch { dir: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
