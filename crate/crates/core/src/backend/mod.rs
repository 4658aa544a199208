//! Chat-completion backends: one generic HTTP adapter, a deterministic mock,
//! a shared on-disk response cache, retries with backoff and an rpm limiter.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod cache;
mod http;
mod mock;

pub use cache::{CacheKey, ResponseCache, CACHE_FILE};
pub use http::{HttpConfig, HttpProvider};
pub use mock::{MockProvider, MockRule, MockSpec};

/// Default completion budget when a task does not configure one.
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

/// Keys of [`ChatRequest::meta`] understood by the harness and the mock.
pub const META_STAGE: &str = "stage";
pub const META_INPUT: &str = "input";
pub const META_DATAPOINT: &str = "datapoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Provider knobs forwarded on the wire (safety settings and the like).
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
    /// Harness annotations (stage, datapoint id, raw input). Never sent to
    /// the provider and never part of the cache key.
    #[serde(skip)]
    pub meta: BTreeMap<String, String>,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            extra: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |reason: &str| Err(BackendError::InvalidRequest(reason.to_string()));
        if self.messages.is_empty() {
            return bad("request has no messages");
        }
        match self.messages.iter().find(|m| m.role != Role::System) {
            Some(m) if m.role == Role::User => {}
            Some(_) => return bad("first non-system message must come from the user"),
            None => return bad("request has only system messages"),
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be a finite value >= 0");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        Ok(())
    }

    pub fn last_user_message(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Blocked,
    Recitation,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    #[serde(rename = "latency_ms", with = "duration_ms")]
    pub latency: Duration,
    /// Provider payload kept verbatim for audit.
    #[serde(default)]
    pub raw: serde_json::Value,
}

mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("rate limited by provider after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("response blocked by safety settings")]
    SafetyBlocked { response: Box<ChatResponse> },
    #[error("response blocked as recitation")]
    RecitationBlocked { response: Box<ChatResponse> },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {message}")]
    Status { status: u16, message: String },
    #[error("request timed out")]
    Timeout,
    #[error("malformed provider reply: {0}")]
    MalformedProviderReply(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("offline and no cached response for {key}")]
    CacheMiss { key: String },
    #[error("cache error on {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("mock rule {index} is invalid: {reason}")]
    InvalidRule { index: usize, reason: String },
}

impl BackendError {
    /// Transient failures worth another attempt. Blocked replies are
    /// deterministic and never retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::RateLimited { .. }
            | BackendError::Transport(_)
            | BackendError::Timeout => true,
            BackendError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }

    /// Blocked outcomes are recorded per datapoint instead of aborting a run.
    pub fn is_blocked(&self) -> bool {
        matches!(
            self,
            BackendError::SafetyBlocked { .. } | BackendError::RecitationBlocked { .. }
        )
    }
}

/// A single provider call without caching, limiting or retries.
pub trait Provider: Send + Sync {
    /// Stable identity folded into cache keys (provider kind plus endpoint).
    fn identity(&self) -> String;

    fn call(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn delay_for(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Spaces calls at least `60 / rpm` seconds apart across all threads.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Option<Duration>,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(rpm: Option<u32>) -> Self {
        Self {
            interval: rpm.filter(|&r| r > 0).map(|r| Duration::from_secs(60) / r),
            next_slot: Mutex::new(None),
        }
    }

    pub fn acquire(&self) {
        let Some(interval) = self.interval else {
            return;
        };
        let wait = {
            let mut slot = self.next_slot.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let start = slot.map_or(now, |s| s.max(now));
            *slot = Some(start + interval);
            start - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

/// A configured model endpoint plus its shared cache and limiter.
pub struct Backend {
    name: String,
    model_id: String,
    provider: Box<dyn Provider>,
    cache: Option<Arc<ResponseCache>>,
    limiter: RateLimiter,
    retry: RetryPolicy,
    offline: bool,
    provider_calls: AtomicU64,
}

impl Backend {
    pub fn new(
        name: impl Into<String>,
        model_id: impl Into<String>,
        provider: Box<dyn Provider>,
    ) -> Self {
        Self {
            name: name.into(),
            model_id: model_id.into(),
            provider,
            cache: None,
            limiter: RateLimiter::new(None),
            retry: RetryPolicy::default(),
            offline: false,
            provider_calls: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_rpm_limit(mut self, rpm: Option<u32>) -> Self {
        self.limiter = RateLimiter::new(rpm);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Serve from the cache only; a miss becomes [`BackendError::CacheMiss`].
    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn provider_identity(&self) -> String {
        self.provider.identity()
    }

    /// Number of calls that reached the provider (cache hits excluded).
    pub fn provider_calls(&self) -> u64 {
        self.provider_calls.load(Ordering::SeqCst)
    }

    pub fn cache_key(&self, req: &ChatRequest) -> CacheKey {
        CacheKey::for_request(&self.provider.identity(), req)
    }

    /// Builds a request for this backend's model.
    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest::new(self.model_id.clone(), messages)
    }
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend")
            .field("name", &self.name)
            .field("model_id", &self.model_id)
            .field("provider", &self.provider.identity())
            .field("offline", &self.offline)
            .finish()
    }
}

fn blocked_error(resp: ChatResponse) -> Result<ChatResponse, BackendError> {
    match resp.finish_reason {
        FinishReason::Blocked => Err(BackendError::SafetyBlocked {
            response: Box::new(resp),
        }),
        FinishReason::Recitation => Err(BackendError::RecitationBlocked {
            response: Box::new(resp),
        }),
        _ => Ok(resp),
    }
}

/// Answers `req` from the cache when possible, otherwise calls the provider
/// with rate limiting and exponential backoff, then stores the reply.
pub fn complete(backend: &Backend, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
    req.validate()?;
    let key = backend.cache_key(req);
    if let Some(cache) = &backend.cache {
        if let Some(hit) = cache.get(&key) {
            tracing::debug!(backend = backend.name(), key = %key, "cache hit");
            return blocked_error(hit);
        }
    }
    if backend.offline {
        return Err(BackendError::CacheMiss {
            key: key.to_string(),
        });
    }

    let mut attempt = 0;
    let resp = loop {
        backend.limiter.acquire();
        backend.provider_calls.fetch_add(1, Ordering::SeqCst);
        match backend.provider.call(req) {
            Ok(resp) => break resp,
            Err(err) if err.is_retryable() && attempt < backend.retry.max_retries => {
                let delay = backend.retry.delay_for(attempt);
                tracing::warn!(backend = backend.name(), attempt, ?delay, error = %err, "retrying");
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
                attempt += 1;
            }
            Err(BackendError::RateLimited { .. }) => {
                return Err(BackendError::RateLimited {
                    attempts: attempt + 1,
                })
            }
            Err(err) => return Err(err),
        }
    };
    if resp.finish_reason == FinishReason::Stop && resp.content.is_empty() {
        return Err(BackendError::MalformedProviderReply(
            "finish_reason=stop with empty content".into(),
        ));
    }
    if let Some(cache) = &backend.cache {
        cache.put(&key, &resp)?;
    }
    blocked_error(resp)
}
