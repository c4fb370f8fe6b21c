//! Text-encoder and chat-completion providers.
//!
//! Pipeline code only ever sees [`Encoder`] and [`ChatProvider`] trait
//! objects, so the remote HTTP implementations and the offline ones
//! ([`HashingEncoder`], [`MockAnnotator`]) are interchangeable.
//! [`CachedEncoder`] / [`CachedChat`] put a [`ResponseCache`] in front of
//! any provider.

mod cache;
mod hashing;
mod mock;
mod remote;

use thiserror::Error;

use crate::embedding::Embedding;

pub use cache::{digest, CachedChat, CachedEncoder, ResponseCache};
pub use hashing::{deterministic_test_encoder, tokenize, HashingEncoder};
pub use mock::{detect_emotions, detect_symptoms, mock_annotator, symptom_keywords, MockAnnotator, EMOTION_KEYWORDS, SYMPTOM_KEYWORDS};
pub use remote::{
    retry_with_backoff, HttpTransport, RemoteChat, RemoteEncoder, RetryPolicy, Transport, TransportError,
    API_KEY_ENV,
};

/// Default prompt budget in characters.
pub const DEFAULT_CONTEXT_CHARS: usize = 24_000;
/// Default bound on concurrent provider requests.
pub const DEFAULT_MAX_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("empty input text")]
    EmptyInput,
    #[error("prompt of {chars} characters exceeds the {cap}-character budget")]
    ContextOverflow { chars: usize, cap: usize },
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Remote,
    Local,
}

pub trait Encoder: Send + Sync {
    /// Identifies the encoder; also the cache namespace.
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Returns a unit-norm embedding of `text`.
    fn encode(&self, text: &str) -> Result<Embedding, ProviderError>;
}

pub trait ChatProvider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String, ProviderError>;

    fn max_concurrency(&self) -> usize {
        DEFAULT_MAX_CONCURRENCY
    }
    fn context_chars(&self) -> usize {
        DEFAULT_CONTEXT_CHARS
    }
    fn kind(&self) -> ProviderKind {
        ProviderKind::Remote
    }
}

/// Encodes `text`, checking the provider keeps its contract.
pub fn encode(provider: &dyn Encoder, text: &str) -> Result<Embedding, ProviderError> {
    if text.trim().is_empty() {
        return Err(ProviderError::EmptyInput);
    }
    let e = provider.encode(text)?;
    if e.dim() != provider.dim() {
        return Err(ProviderError::InvalidResponse(format!(
            "{} returned dim {} (declared {})",
            provider.name(),
            e.dim(),
            provider.dim()
        )));
    }
    if !e.is_unit() {
        return Err(ProviderError::InvalidResponse(format!(
            "{} returned a non-normalized embedding (norm {})",
            provider.name(),
            e.norm()
        )));
    }
    Ok(e)
}

/// Sends `prompt`, enforcing the provider's character budget.
pub fn complete(provider: &dyn ChatProvider, prompt: &str) -> Result<String, ProviderError> {
    if prompt.trim().is_empty() {
        return Err(ProviderError::EmptyInput);
    }
    let chars = prompt.chars().count();
    let cap = provider.context_chars();
    if chars > cap {
        return Err(ProviderError::ContextOverflow { chars, cap });
    }
    provider.complete(prompt)
}

/// Normalizes a raw vector returned by an upstream encoder.
pub(crate) fn normalize_upstream(values: Vec<f64>) -> Result<Embedding, ProviderError> {
    Embedding::normalized(values).map_err(|e| ProviderError::InvalidResponse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;
    impl ChatProvider for Echo {
        fn name(&self) -> &str {
            "echo"
        }
        fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
            Ok(prompt.to_string())
        }
        fn context_chars(&self) -> usize {
            10
        }
    }

    #[test]
    fn complete_enforces_budget() {
        assert_eq!(complete(&Echo, "short").unwrap(), "short");
        assert_eq!(
            complete(&Echo, "this is far too long"),
            Err(ProviderError::ContextOverflow { chars: 20, cap: 10 })
        );
        assert_eq!(complete(&Echo, "  "), Err(ProviderError::EmptyInput));
    }

    #[test]
    fn encode_rejects_empty_text() {
        let enc = deterministic_test_encoder(16, 0);
        assert_eq!(encode(&enc, " \n"), Err(ProviderError::EmptyInput));
    }

    struct Sloppy;
    impl Encoder for Sloppy {
        fn name(&self) -> &str {
            "sloppy"
        }
        fn dim(&self) -> usize {
            2
        }
        fn encode(&self, _: &str) -> Result<Embedding, ProviderError> {
            Ok(Embedding::new(vec![3.0, 4.0]).unwrap())
        }
    }

    #[test]
    fn encode_checks_normalization() {
        assert!(matches!(encode(&Sloppy, "x"), Err(ProviderError::InvalidResponse(_))));
    }
}
