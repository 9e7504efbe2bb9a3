//! Chat-completion backends behind one blocking interface.
//!
//! * [`OpenAiClient`] speaks the OpenAI-compatible `/v1/chat/completions`
//!   protocol with retry and backoff.
//! * [`MockOracle`] is a rule-based stand-in that answers the shipped stage
//!   templates deterministically.
//! * [`CachedBackend`] records and replays responses keyed by request hash.

mod cache;
mod mock;
mod openai;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheEntry, CachedBackend};
pub use mock::{KeywordRule, KeywordRules, MockEvidence, MockOracle};
pub use openai::OpenAiClient;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed completion payload: {0}")]
    Decode(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        #[source]
        last: Box<BackendError>,
    },
    #[error("cache miss for request {request_id}")]
    CacheMiss { request_id: String },
    #[error("cache file {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("mock oracle: {0}")]
    Mock(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("network access is disabled (request {request_id})")]
    NetworkDisabled { request_id: String },
}

impl BackendError {
    /// Only transport failures and server errors are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: "system".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// SHA-256 over the fields above; the cache key.
    pub request_id: String,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>, temperature: f64, max_tokens: u32) -> Self {
        let model = model.into();
        let request_id = Self::compute_id(&model, &messages, temperature, max_tokens);
        CompletionRequest {
            model,
            messages,
            temperature,
            max_tokens,
            request_id,
        }
    }

    pub fn compute_id(model: &str, messages: &[Message], temperature: f64, max_tokens: u32) -> String {
        let canonical = serde_json::json!({
            "model": model,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": max_tokens,
        });
        let mut hasher = Sha256::new();
        hasher.update(canonical.to_string().as_bytes());
        hex::encode(hasher.finalize())
    }

    /// Concatenated message contents, used by the mock oracle.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub trait Backend: Send + Sync {
    /// Returns the assistant message content for `request`.
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;

    /// Short identifier for logs.
    fn describe(&self) -> String;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            backoff_base_ms: 500,
            backoff_cap_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (attempts are 1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(self.backoff_cap_ms))
    }

    /// Runs `op` until it succeeds, fails permanently, or attempts run out.
    pub fn run<T>(&self, mut op: impl FnMut(u32) -> Result<T, BackendError>) -> Result<T, BackendError> {
        let max = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < max => {
                    let delay = self.delay(attempt);
                    tracing::warn!(attempt, error = %e, delay_ms = delay.as_millis() as u64, "retrying completion");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) if e.is_retryable() => {
                    return Err(BackendError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    #[default]
    Off,
    /// Serve hits from the cache, call the backend on misses and append them.
    Record,
    /// Serve hits from the cache, fall through to the backend on misses.
    Replay,
    /// Serve hits only; a miss is an error and no backend is ever called.
    ReplayStrict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub mode: CacheMode,
    pub path: Option<PathBuf>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            mode: CacheMode::Off,
            path: None,
        }
    }
}

/// Connection and execution settings for a live or cached backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    pub auth_env: Option<String>,
    pub timeout_secs: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub parallelism: usize,
    pub retry: RetryPolicy,
    pub cache: CacheConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: "http://localhost:8000".into(),
            model: "mistral-7b-instruct".into(),
            auth_env: None,
            timeout_secs: 120,
            temperature: 0.0,
            max_tokens: 1024,
            parallelism: 4,
            retry: RetryPolicy::default(),
            cache: CacheConfig::default(),
        }
    }
}

impl BackendConfig {
    pub fn from_toml(text: &str) -> Result<Self, BackendError> {
        let cfg: BackendConfig = toml::from_str(text).map_err(|e| BackendError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.model.trim().is_empty() {
            return Err(BackendError::Config("model must not be empty".into()));
        }
        if self.parallelism == 0 {
            return Err(BackendError::Config("parallelism must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::Config("temperature must be within [0, 2]".into()));
        }
        if self.cache.mode != CacheMode::Off && self.cache.path.is_none() {
            return Err(BackendError::Config("cache mode requires a cache path".into()));
        }
        Ok(())
    }
}

/// Wraps `live` (constructed lazily) according to the cache mode. In
/// `ReplayStrict` the live backend is never constructed.
pub fn with_cache(
    cache: &CacheConfig,
    live: impl FnOnce() -> Result<Arc<dyn Backend>, BackendError>,
) -> Result<Arc<dyn Backend>, BackendError> {
    let path = || {
        cache
            .path
            .clone()
            .ok_or_else(|| BackendError::Config("cache mode requires a cache path".into()))
    };
    Ok(match cache.mode {
        CacheMode::Off => live()?,
        CacheMode::ReplayStrict => Arc::new(CachedBackend::open(path()?, CacheMode::ReplayStrict, None)?),
        mode => Arc::new(CachedBackend::open(path()?, mode, Some(live()?))?),
    })
}

/// A backend that refuses every call and counts the attempts. Used to prove
/// a code path performs no network activity.
#[derive(Debug, Default)]
pub struct NetworkGuard {
    calls: AtomicUsize,
}

impl NetworkGuard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for NetworkGuard {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Err(BackendError::NetworkDisabled {
            request_id: request.request_id.clone(),
        })
    }

    fn describe(&self) -> String {
        "network-guard".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_id_depends_on_content_only() {
        let a = CompletionRequest::new("m", vec![Message::user("hello")], 0.0, 256);
        let b = CompletionRequest::new("m", vec![Message::user("hello")], 0.0, 256);
        assert_eq!(a.request_id, b.request_id);
        assert_eq!(a.request_id.len(), 64);
        let c = CompletionRequest::new("m", vec![Message::user("hellp")], 0.0, 256);
        assert_ne!(a.request_id, c.request_id);
        let d = CompletionRequest::new("m", vec![Message::user("hello")], 0.5, 256);
        assert_ne!(a.request_id, d.request_id);
    }

    #[test]
    fn request_id_ignores_connection_settings() {
        let mut cfg = BackendConfig::default();
        let id = |cfg: &BackendConfig| {
            CompletionRequest::new(&cfg.model, vec![Message::user("x")], cfg.temperature, cfg.max_tokens).request_id
        };
        let before = id(&cfg);
        cfg.endpoint = "https://example.invalid".into();
        cfg.timeout_secs = 5;
        cfg.parallelism = 17;
        cfg.retry.max_attempts = 9;
        cfg.auth_env = Some("TOKEN".into());
        assert_eq!(before, id(&cfg));
    }

    #[test]
    fn backoff_is_exponential_and_capped() {
        let p = RetryPolicy {
            max_attempts: 5,
            backoff_base_ms: 100,
            backoff_cap_ms: 350,
        };
        assert_eq!(p.delay(1), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(200));
        assert_eq!(p.delay(3), Duration::from_millis(350));
    }

    #[test]
    fn retry_stops_on_permanent_error() {
        let p = RetryPolicy {
            max_attempts: 5,
            backoff_base_ms: 0,
            backoff_cap_ms: 0,
        };
        let mut calls = 0;
        let r: Result<(), _> = p.run(|_| {
            calls += 1;
            Err(BackendError::Http {
                status: 400,
                body: "bad".into(),
            })
        });
        assert!(matches!(r, Err(BackendError::Http { status: 400, .. })));
        assert_eq!(calls, 1);

        let mut calls = 0;
        let r: Result<(), _> = p.run(|_| {
            calls += 1;
            Err(BackendError::Transport("reset".into()))
        });
        assert!(matches!(r, Err(BackendError::Exhausted { attempts: 5, .. })));
        assert_eq!(calls, 5);
    }

    #[test]
    fn config_parses_and_validates() {
        let cfg = BackendConfig::from_toml(
            r#"
            endpoint = "http://127.0.0.1:9000"
            model = "qwen3-8b"
            parallelism = 2
            [retry]
            max_attempts = 2
            [cache]
            mode = "replay_strict"
            path = "cache.jsonl"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model, "qwen3-8b");
        assert_eq!(cfg.retry.max_attempts, 2);
        assert_eq!(cfg.retry.backoff_base_ms, 500);
        assert_eq!(cfg.cache.mode, CacheMode::ReplayStrict);
        assert_eq!(cfg.temperature, 0.0);

        assert!(BackendConfig::from_toml("parallelism = 0").is_err());
        assert!(BackendConfig::from_toml("[cache]\nmode = \"record\"").is_err());
    }

    #[test]
    fn strict_replay_never_builds_live_backend() {
        let dir = tempfile::tempdir().unwrap();
        let cache = CacheConfig {
            mode: CacheMode::ReplayStrict,
            path: Some(dir.path().join("c.jsonl")),
        };
        let backend = with_cache(&cache, || panic!("live backend constructed")).unwrap();
        let req = CompletionRequest::new("m", vec![Message::user("q")], 0.0, 8);
        assert!(matches!(backend.complete(&req), Err(BackendError::CacheMiss { .. })));
    }
}
