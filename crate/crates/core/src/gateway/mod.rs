//! Chat-completion and embedding client for OpenAI-compatible servers,
//! with an on-disk response cache, retries with exponential backoff, a
//! bound on in-flight requests and an in-process mock backend.

mod cache;
pub mod mock;
mod transport;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use cache::{cache_key, ResponseCache};
pub use mock::{mock_embedding, MockTransport, Responder, ToolkitResponder};
pub use transport::{Fault, FlakyTransport, HttpResponse, HttpTransport, Transport, TransportError};

use crate::prompting::{ChatMessage, ChatRequest};

pub const MOCK_URL: &str = "mock://local";
pub const MAX_EMBED_BATCH: usize = 128;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("server error {status} after {attempts} attempts")]
    Server { status: u16, attempts: u32 },
    #[error("request rejected with status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("connection failed after {attempts} attempts: {reason}")]
    Connection { reason: String, attempts: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("offline and no cached response for {0}")]
    CacheMiss(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Cache namespace; also used in logs.
    pub id: String,
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub embedding_model: Option<String>,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Seed of the mock backend; ignored for HTTP backends.
    #[serde(default)]
    pub seed: u64,
}

impl BackendConfig {
    pub fn mock(seed: u64) -> Self {
        Self {
            id: format!("mock-{seed}"),
            base_url: MOCK_URL.into(),
            model: "mock".into(),
            embedding_model: None,
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            temperature: 0.0,
            max_tokens: None,
            max_in_flight: default_in_flight(),
            seed,
        }
    }

    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with("mock://")
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidConfig(m.into()));
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return bad("id must be nonempty and use only [A-Za-z0-9-_.]");
        }
        if !(self.timeout_secs > 0.0) {
            return bad("timeout_secs must be positive");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1");
        }
        Ok(())
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{path}", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub factor: f64,
    /// Extra random fraction of each delay, drawn from `[0, jitter)`.
    pub jitter: f64,
}

impl RetryPolicy {
    pub fn new(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.25,
        }
    }

    pub fn immediate(max_retries: u32) -> Self {
        Self {
            base_delay: Duration::ZERO,
            ..Self::new(max_retries)
        }
    }

    pub fn delay(&self, retry: u32) -> Duration {
        let base = self.base_delay.as_secs_f64() * self.factor.powi(retry as i32);
        let jitter = if self.jitter > 0.0 && base > 0.0 {
            rand::rng().random_range(0.0..self.jitter)
        } else {
            0.0
        };
        Duration::from_secs_f64(base * (1.0 + jitter))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub cached: bool,
    pub retries: u32,
    /// Cache key of the request; stable across runs.
    pub call_id: String,
}

/// Counting semaphore for the in-flight bound.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct PermitGuard<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        PermitGuard(self)
    }
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Serialize)]
struct EmbedBody<'a, T: Serialize> {
    model: &'a str,
    input: T,
}

pub struct Gateway {
    config: BackendConfig,
    transport: Arc<dyn Transport>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    offline: bool,
    permits: Permits,
    network_calls: AtomicUsize,
}

impl Gateway {
    /// HTTP transport for real backends, [`MockTransport`] for `mock://` URLs.
    pub fn new(config: BackendConfig) -> Result<Self, GatewayError> {
        let transport: Arc<dyn Transport> = if config.is_mock() {
            Arc::new(MockTransport::new(config.seed))
        } else {
            Arc::new(HttpTransport::default())
        };
        Self::with_transport(config, transport)
    }

    pub fn with_transport(config: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Self {
            retry: RetryPolicy::new(config.max_retries),
            permits: Permits::new(config.max_in_flight),
            config,
            transport,
            cache: None,
            offline: false,
            network_calls: AtomicUsize::new(0),
        })
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Offline gateways answer HTTP backends from the cache only.
    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Requests handed to the transport, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    fn headers(&self) -> Result<Vec<(String, String)>, GatewayError> {
        match &self.config.api_key_env {
            Some(var) if !self.config.is_mock() => {
                let key = std::env::var(var).map_err(|_| GatewayError::Auth(format!("environment variable {var} is not set")))?;
                Ok(vec![("Authorization".into(), format!("Bearer {key}"))])
            }
            _ => Ok(Vec::new()),
        }
    }

    /// POSTs `body`, retrying transient failures. Returns the body and retry count.
    fn send(&self, path: &str, body: &str) -> Result<(String, u32), GatewayError> {
        if self.offline && !self.config.is_mock() {
            return Err(GatewayError::CacheMiss(cache_key(&self.config.id, body)));
        }
        let headers = self.headers()?;
        let url = self.config.endpoint(path);
        let timeout = Duration::from_secs_f64(self.config.timeout_secs);
        let _permit = self.permits.acquire();
        let mut retries = 0;
        loop {
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let attempts = retries + 1;
            let err = match self.transport.post_json(&url, &headers, body, timeout) {
                Ok(r) if (200..300).contains(&r.status) => return Ok((r.body, retries)),
                Ok(r) if r.status == 401 || r.status == 403 => return Err(GatewayError::Auth(r.body)),
                Ok(r) if r.status == 429 => GatewayError::RateLimited { attempts },
                Ok(r) if r.status >= 500 => GatewayError::Server { status: r.status, attempts },
                Ok(r) => return Err(GatewayError::Http { status: r.status, body: r.body }),
                Err(TransportError::Timeout) => GatewayError::Timeout { attempts },
                Err(TransportError::Connect(reason)) => GatewayError::Connection { reason, attempts },
            };
            if retries >= self.retry.max_retries {
                return Err(err);
            }
            tracing::warn!(backend = %self.config.id, retry = retries + 1, "{err}; retrying");
            std::thread::sleep(self.retry.delay(retries));
            retries += 1;
        }
    }

    fn cached(&self, key: &str) -> Result<Option<String>, GatewayError> {
        match &self.cache {
            Some(c) => Ok(c.get(&self.config.id, key)?),
            None => Ok(None),
        }
    }

    fn store(&self, key: &str, value: &str) -> Result<(), GatewayError> {
        if let Some(c) = &self.cache {
            c.put(&self.config.id, key, value)?;
        }
        Ok(())
    }

    pub fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let body = serde_json::to_string(&ChatBody {
            model: &self.config.model,
            messages: &request.messages,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        })
        .expect("request serializes");
        let key = cache_key(&self.config.id, &body);
        if let Some(hit) = self.cached(&key)? {
            let (text, usage) = parse_chat(&hit)?;
            return Ok(ChatResponse { text, usage, cached: true, retries: 0, call_id: key });
        }
        let (raw, retries) = self.send("chat/completions", &body)?;
        let (text, usage) = parse_chat(&raw)?;
        self.store(&key, &raw)?;
        Ok(ChatResponse { text, usage, cached: false, retries, call_id: key })
    }

    fn embedding_model(&self) -> &str {
        self.config.embedding_model.as_deref().unwrap_or(&self.config.model)
    }

    fn text_key(&self, text: &str) -> String {
        let body = serde_json::to_string(&EmbedBody { model: self.embedding_model(), input: text }).unwrap();
        cache_key(&self.config.id, &body)
    }

    /// One vector per text. Each text is cached on its own; misses are sent
    /// in batches of at most [`MAX_EMBED_BATCH`].
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let mut out: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        let mut misses: Vec<&str> = Vec::new();
        let mut miss_slots: std::collections::HashMap<&str, Vec<usize>> = std::collections::HashMap::new();
        for (i, t) in texts.iter().enumerate() {
            let key = self.text_key(t);
            if let Some(hit) = self.cached(&key)? {
                out[i] = Some(serde_json::from_str(&hit).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?);
            } else {
                let slots = miss_slots.entry(t.as_str()).or_default();
                if slots.is_empty() {
                    misses.push(t);
                }
                slots.push(i);
            }
        }
        for batch in misses.chunks(MAX_EMBED_BATCH) {
            let body = serde_json::to_string(&EmbedBody { model: self.embedding_model(), input: batch }).unwrap();
            let (raw, _) = self.send("embeddings", &body)?;
            let vectors = parse_embeddings(&raw, batch.len())?;
            for (t, v) in batch.iter().zip(vectors) {
                self.store(&self.text_key(t), &serde_json::to_string(&v).unwrap())?;
                for &slot in &miss_slots[t] {
                    out[slot] = Some(v.clone());
                }
            }
        }
        let out: Vec<Vec<f32>> = out.into_iter().map(|v| v.expect("every slot filled")).collect();
        if out.iter().any(|v| v.len() != out[0].len()) {
            return Err(GatewayError::MalformedResponse("embedding dimensions differ".into()));
        }
        Ok(out)
    }
}

fn parse_chat(raw: &str) -> Result<(String, Usage), GatewayError> {
    let bad = |m: &str| GatewayError::MalformedResponse(m.into());
    let v: Value = serde_json::from_str(raw).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("no choices[0].message.content"))?
        .to_string();
    let usage = v
        .get("usage")
        .map(|u| Usage {
            prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
        })
        .unwrap_or_default();
    Ok((text, usage))
}

fn parse_embeddings(raw: &str, expected: usize) -> Result<Vec<Vec<f32>>, GatewayError> {
    #[derive(Deserialize)]
    struct Item {
        #[serde(default)]
        index: Option<usize>,
        embedding: Vec<f32>,
    }
    #[derive(Deserialize)]
    struct Resp {
        data: Vec<Item>,
    }
    let mut r: Resp = serde_json::from_str(raw).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    if r.data.len() != expected {
        return Err(GatewayError::MalformedResponse(format!("{} embeddings for {expected} inputs", r.data.len())));
    }
    if r.data.iter().all(|d| d.index.is_some()) {
        r.data.sort_by_key(|d| d.index);
    }
    Ok(r.data.into_iter().map(|d| d.embedding).collect())
}
