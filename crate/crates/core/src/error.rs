use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numerical guard: {0}")]
    Numerical(String),

    #[error("missing residue indices in embedding table: {0:?}")]
    MissingResidues(Vec<i64>),

    #[error("unknown residue label {0:?}")]
    UnknownResidue(String),

    #[error("unknown atom type {0:?}")]
    UnknownAtomType(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("embedding file {path}: {source}")]
    Embedding { path: PathBuf, source: crate::embeddings::EmbeddingError },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("not implemented: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
