use std::path::PathBuf;

use pced_core::decoder::DecodeError;
use pced_core::synthetic::SyntheticError;
use pced_core::{ProviderError, ScoreError};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate document id {0:?}")]
    DuplicateDocument(String),
    #[error("provider failed on document {doc_id:?}: {source}")]
    BuildFailed {
        doc_id: String,
        #[source]
        source: ProviderError,
    },
    #[error("store corrupted: {0}")]
    Corrupt(String),
    #[error("document {0:?} not found")]
    NotFound(String),
    #[error("embedding dimension mismatch: store has {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bench failed: {0}")]
    Bench(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
