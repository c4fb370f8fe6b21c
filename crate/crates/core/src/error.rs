use std::path::PathBuf;

use thiserror::Error;

use crate::providers::ProviderError;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: malformed record: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate user_id {user_id:?} on lines {first_line} and {second_line}")]
    DuplicateUser {
        user_id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("post {post_id:?}: unparseable timestamp {value:?}")]
    BadTimestamp { post_id: String, value: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("model file: {0}")]
    Model(String),
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the root cause is a provider failure.
    pub fn is_provider(&self) -> bool {
        match self {
            Error::Provider(_) => true,
            Error::Stage { source, .. } => source.is_provider(),
            _ => false,
        }
    }

    /// True for input/config validation failures.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::MalformedLine { .. }
            | Error::DuplicateUser { .. }
            | Error::BadTimestamp { .. }
            | Error::Invalid(_)
            | Error::DimensionMismatch { .. }
            | Error::Model(_)
            | Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
