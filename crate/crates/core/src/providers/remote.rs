//! HTTP-backed providers speaking a minimal chat-completion / embeddings
//! JSON shape, with exponential-backoff retry.

use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use crate::embedding::Embedding;

use super::{normalize_upstream, ChatProvider, Encoder, ProviderError, DEFAULT_CONTEXT_CHARS, DEFAULT_MAX_CONCURRENCY};

/// Environment variable holding the bearer token for remote providers.
pub const API_KEY_ENV: &str = "DORIS_API_KEY";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("timeout: {0}")]
    Timeout(String),
    #[error("connection: {0}")]
    Connection(String),
}

impl TransportError {
    /// 429, 5xx, timeouts and connection failures are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status == 429 || (500..600).contains(status),
            TransportError::Timeout(_) | TransportError::Connection(_) => true,
        }
    }
}

/// Sends one JSON POST and returns the response body of a 2xx reply.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &str) -> Result<String, TransportError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        HttpTransport { agent: config.into() }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport::new(Duration::from_secs(60))
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &str) -> Result<String, TransportError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| match e {
            ureq::Error::Timeout(t) => TransportError::Timeout(t.to_string()),
            other => TransportError::Connection(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Connection(e.to_string()))?;
        if (200..300).contains(&status) {
            Ok(text)
        } else {
            Err(TransportError::Status { status, body: text })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay after failed attempt `attempt` (1-based): `base * 2^(attempt-1)`.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Runs `op` until it succeeds, fails with a non-retryable error, or the
/// attempt budget is spent. Returns the value and the number of attempts.
pub fn retry_with_backoff<T, F>(
    policy: &RetryPolicy,
    sleep: &dyn Fn(Duration),
    mut op: F,
) -> Result<(T, u32), ProviderError>
where
    F: FnMut(u32) -> Result<T, TransportError>,
{
    let max = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match op(attempt) {
            Ok(v) => return Ok((v, attempt)),
            Err(TransportError::Status { status, body }) if !(status == 429 || status >= 500) => {
                return Err(ProviderError::Rejected { status, body });
            }
            Err(e) if attempt >= max || !e.is_retryable() => {
                return Err(ProviderError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                });
            }
            Err(e) => {
                log::warn!("attempt {attempt}/{max} failed: {e}; retrying");
                sleep(policy.delay(attempt));
                attempt += 1;
            }
        }
    }
}

/// Shared request plumbing for the remote providers.
struct Endpoint {
    transport: Arc<dyn Transport>,
    url: String,
    model: String,
    api_key: Option<String>,
    policy: RetryPolicy,
    last_attempts: AtomicU32,
    requests: AtomicUsize,
}

impl Endpoint {
    fn post(&self, body: &Value) -> Result<Value, ProviderError> {
        let body = body.to_string();
        let (text, attempts) = retry_with_backoff(&self.policy, &std::thread::sleep, |_| {
            self.requests.fetch_add(1, Ordering::SeqCst);
            self.transport.post_json(&self.url, self.api_key.as_deref(), &body)
        })?;
        self.last_attempts.store(attempts, Ordering::SeqCst);
        serde_json::from_str(&text).map_err(|e| ProviderError::InvalidResponse(e.to_string()))
    }
}

/// Chat provider for an OpenAI-style `/chat/completions` endpoint: a single
/// user message goes in, the first choice's text comes out.
pub struct RemoteChat {
    name: String,
    endpoint: Endpoint,
    temperature: f64,
    max_concurrency: usize,
    context_chars: usize,
}

impl RemoteChat {
    pub fn new(transport: Arc<dyn Transport>, url: impl Into<String>, model: impl Into<String>) -> Self {
        let model = model.into();
        RemoteChat {
            name: format!("remote-chat:{model}:t0"),
            endpoint: Endpoint {
                transport,
                url: url.into(),
                model,
                api_key: None,
                policy: RetryPolicy::default(),
                last_attempts: AtomicU32::new(0),
                requests: AtomicUsize::new(0),
            },
            temperature: 0.0,
            max_concurrency: DEFAULT_MAX_CONCURRENCY,
            context_chars: DEFAULT_CONTEXT_CHARS,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.endpoint.api_key = key;
        self
    }

    pub fn with_retry(mut self, policy: RetryPolicy) -> Self {
        self.endpoint.policy = policy;
        self
    }

    pub fn with_limits(mut self, max_concurrency: usize, context_chars: usize) -> Self {
        self.max_concurrency = max_concurrency.max(1);
        self.context_chars = context_chars;
        self
    }

    /// Attempts used by the most recent successful request.
    pub fn last_attempts(&self) -> u32 {
        self.endpoint.last_attempts.load(Ordering::SeqCst)
    }

    /// Total HTTP requests sent, retries included.
    pub fn requests_sent(&self) -> usize {
        self.endpoint.requests.load(Ordering::SeqCst)
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        })
    }
}

impl ChatProvider for RemoteChat {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let resp = self.endpoint.post(&self.request_body(prompt))?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::InvalidResponse("missing choices[0].message.content".into()))
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn context_chars(&self) -> usize {
        self.context_chars
    }
}

/// Encoder for an OpenAI-style `/embeddings` endpoint. Outputs are
/// re-normalized locally.
pub struct RemoteEncoder {
    name: String,
    dim: usize,
    endpoint: Endpoint,
}

impl RemoteEncoder {
    pub fn new(transport: Arc<dyn Transport>, url: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        let model = model.into();
        RemoteEncoder {
            name: format!("remote-embed:{model}"),
            dim,
            endpoint: Endpoint {
                transport,
                url: url.into(),
                model,
                api_key: None,
                policy: RetryPolicy::default(),
                last_attempts: AtomicU32::new(0),
                requests: AtomicUsize::new(0),
            },
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.endpoint.api_key = key;
        self
    }

    pub fn with_retry(mut self, policy: RetryPolicy) -> Self {
        self.endpoint.policy = policy;
        self
    }

    pub fn requests_sent(&self) -> usize {
        self.endpoint.requests.load(Ordering::SeqCst)
    }
}

impl Encoder for RemoteEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Embedding, ProviderError> {
        let resp = self.endpoint.post(&json!({"model": self.endpoint.model, "input": text}))?;
        let values: Vec<f64> = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::InvalidResponse("missing data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| ProviderError::InvalidResponse("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        if values.len() != self.dim {
            return Err(ProviderError::InvalidResponse(format!(
                "expected {} dimensions, got {}",
                self.dim,
                values.len()
            )));
        }
        normalize_upstream(values)
    }
}
