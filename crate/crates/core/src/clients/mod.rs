//! HTTP clients for the chat-completion, scoring and classifier services.
//!
//! Every client sits on an [`Endpoint`], which owns retry/backoff, the
//! in-flight request cap and optional cassette record/replay. Transports are
//! swappable so tests and offline runs never touch the network.

mod cassette;
pub mod mock;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use cassette::{CassetteEntry, CassetteTransport, RecordingTransport};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{endpoint}: HTTP {status}: {body}")]
    Http {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("{endpoint}: gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        endpoint: String,
        attempts: u32,
        last: String,
    },
    #[error("{endpoint}: malformed response: {message}")]
    Malformed { endpoint: String, message: String },
    #[error("{endpoint}: expected {expected} results, got {actual}")]
    LengthMismatch {
        endpoint: String,
        expected: usize,
        actual: usize,
    },
    #[error("cassette {cassette}: no recorded response for {path} request {key}")]
    CassetteMiss {
        cassette: String,
        path: String,
        key: String,
    },
    #[error("cassette {path}: {message}")]
    Cassette { path: String, message: String },
    #[error("endpoint configuration: {0}")]
    Config(String),
}

/// Raw outcome of a single POST.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// A connection-level failure (refused, reset, timeout). Always retryable.
#[derive(Debug, Clone)]
pub struct TransportFailure(pub String);

pub trait Transport: Send + Sync {
    fn post(&self, path: &str, body: &str, bearer: Option<&str>) -> Result<HttpResponse, TransportFailure>;

    /// Persists any recorded traffic. No-op for most transports.
    fn flush(&self) -> Result<(), ClientError> {
        Ok(())
    }
}

pub struct HttpTransport {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            base_url: base_url.trim_end_matches('/').to_owned(),
            agent,
        }
    }
}

impl Transport for HttpTransport {
    fn post(&self, path: &str, body: &str, bearer: Option<&str>) -> Result<HttpResponse, TransportFailure> {
        let url = format!("{}{}", self.base_url, path);
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send(body)
            .map_err(|e| TransportFailure(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportFailure(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    #[default]
    Off,
    Record,
    Replay,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> f64 {
    0.5
}
fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// `http(s)://host[:port][/prefix]`, or `mock://<name>` for the built-in
    /// deterministic stand-in.
    pub base_url: String,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default)]
    pub auth_token_env_var: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_secs: f64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub cassette: Option<PathBuf>,
    #[serde(default)]
    pub cassette_mode: CassetteMode,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            auth_token_env_var: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_base_secs: default_backoff(),
            concurrency: default_concurrency(),
            cassette: None,
            cassette_mode: CassetteMode::Off,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(ClientError::Config("timeout_secs must be > 0".into()));
        }
        if !(self.backoff_base_secs >= 0.0 && self.backoff_base_secs.is_finite()) {
            return Err(ClientError::Config("backoff_base_secs must be >= 0".into()));
        }
        if self.concurrency == 0 {
            return Err(ClientError::Config("concurrency must be >= 1".into()));
        }
        if self.cassette_mode != CassetteMode::Off && self.cassette.is_none() {
            return Err(ClientError::Config("cassette_mode requires a cassette path".into()));
        }
        Ok(())
    }

    /// Resolves a relative cassette path against `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        if let Some(c) = &self.cassette {
            if c.is_relative() {
                self.cassette = Some(dir.join(c));
            }
        }
    }
}

/// Counting semaphore capping in-flight requests.
struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Permits {
            available: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

/// A configured service endpoint: transport plus retry policy.
pub struct Endpoint {
    cfg: EndpointConfig,
    transport: Arc<dyn Transport>,
    permits: Permits,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint").field("base_url", &self.cfg.base_url).finish()
    }
}

impl Endpoint {
    pub fn from_config(cfg: EndpointConfig) -> Result<Self, ClientError> {
        cfg.validate()?;
        let transport: Arc<dyn Transport> = match cfg.cassette_mode {
            CassetteMode::Replay => {
                let path = cfg.cassette.as_ref().expect("validated");
                Arc::new(CassetteTransport::load(path)?)
            }
            mode => {
                let inner: Arc<dyn Transport> = if let Some(name) = cfg.base_url.strip_prefix("mock://") {
                    Arc::new(mock::MockTransport::named(name))
                } else if cfg.base_url.starts_with("http://") || cfg.base_url.starts_with("https://") {
                    Arc::new(HttpTransport::new(
                        &cfg.base_url,
                        Duration::from_secs_f64(cfg.timeout_secs),
                    ))
                } else {
                    return Err(ClientError::Config(format!("unsupported base_url {:?}", cfg.base_url)));
                };
                if mode == CassetteMode::Record {
                    let path = cfg.cassette.clone().expect("validated");
                    Arc::new(RecordingTransport::new(inner, path))
                } else {
                    inner
                }
            }
        };
        Ok(Self::with_transport(cfg, transport))
    }

    pub fn with_transport(cfg: EndpointConfig, transport: Arc<dyn Transport>) -> Self {
        let permits = Permits::new(cfg.concurrency.max(1));
        Endpoint {
            cfg,
            transport,
            permits,
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn flush(&self) -> Result<(), ClientError> {
        self.transport.flush()
    }

    fn bearer(&self) -> Option<String> {
        let var = self.cfg.auth_token_env_var.as_deref()?;
        std::env::var(var).ok().filter(|t| !t.is_empty())
    }

    /// POSTs a JSON body, retrying transport failures, 429 and 5xx with
    /// exponential backoff. Other non-2xx statuses are terminal.
    pub fn post_json(&self, path: &str, body: &Value) -> Result<Value, ClientError> {
        let body = body.to_string();
        let bearer = self.bearer();
        let _permit = self.permits.acquire();
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.cfg.backoff_base_secs * 2f64.powi(attempt as i32 - 1);
                if delay > 0.0 {
                    std::thread::sleep(Duration::from_secs_f64(delay));
                }
            }
            match self.transport.post(path, &body, bearer.as_deref()) {
                Err(TransportFailure(msg)) => {
                    log::warn!("{}{path}: transport failure (attempt {}): {msg}", self.cfg.base_url, attempt + 1);
                    last = msg;
                }
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return serde_json::from_str(&resp.body).map_err(|e| ClientError::Malformed {
                        endpoint: self.label(path),
                        message: e.to_string(),
                    });
                }
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    log::warn!("{}{path}: HTTP {} (attempt {})", self.cfg.base_url, resp.status, attempt + 1);
                    last = format!("HTTP {}: {}", resp.status, truncate(&resp.body, 200));
                }
                Ok(resp) => {
                    return Err(ClientError::Http {
                        endpoint: self.label(path),
                        status: resp.status,
                        body: truncate(&resp.body, 500),
                    })
                }
            }
        }
        Err(ClientError::RetriesExhausted {
            endpoint: self.label(path),
            attempts,
            last,
        })
    }

    fn label(&self, path: &str) -> String {
        format!("{}{}", self.cfg.base_url, path)
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_owned(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

pub const CHAT_PATH: &str = "/chat/completions";
pub const SCORE_PATH: &str = "/score";
pub const CLASSIFY_PATH: &str = "/classify";

/// Anything that can turn a chat request into completion text.
pub trait ChatCompletion: Send + Sync {
    fn chat_complete(&self, request: &ChatRequest) -> Result<String, ClientError>;
}

#[derive(Debug)]
pub struct ChatClient {
    endpoint: Endpoint,
}

impl ChatClient {
    pub fn new(endpoint: Endpoint) -> Self {
        ChatClient { endpoint }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }
}

impl ChatCompletion for ChatClient {
    fn chat_complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let body = serde_json::to_value(request).expect("chat request serializes");
        let resp = self.endpoint.post_json(CHAT_PATH, &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| ClientError::Malformed {
                endpoint: self.endpoint.label(CHAT_PATH),
                message: "missing choices[0].message.content".into(),
            })
    }
}

/// Anything that can assign perplexities to texts.
pub trait PplScorer: Send + Sync {
    fn score_ppl(&self, texts: &[String]) -> Result<Vec<f64>, ClientError>;
}

pub const DEFAULT_SCORE_BATCH: usize = 64;

#[derive(Debug)]
pub struct ScoreClient {
    endpoint: Endpoint,
    batch_size: usize,
}

impl ScoreClient {
    pub fn new(endpoint: Endpoint, batch_size: usize) -> Self {
        ScoreClient {
            endpoint,
            batch_size: batch_size.max(1),
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn score_batch(&self, texts: &[String]) -> Result<Vec<f64>, ClientError> {
        let resp = self.endpoint.post_json(SCORE_PATH, &json!({ "texts": texts }))?;
        let label = || self.endpoint.label(SCORE_PATH);
        let arr = resp
            .get("ppl")
            .and_then(Value::as_array)
            .ok_or_else(|| ClientError::Malformed {
                endpoint: label(),
                message: "missing `ppl` array".into(),
            })?;
        if arr.len() != texts.len() {
            return Err(ClientError::LengthMismatch {
                endpoint: label(),
                expected: texts.len(),
                actual: arr.len(),
            });
        }
        arr.iter()
            .map(|v| match v.as_f64() {
                Some(p) if p.is_finite() && p > 0.0 => Ok(p),
                _ => Err(ClientError::Malformed {
                    endpoint: label(),
                    message: format!("ppl value {v} is not a positive finite number"),
                }),
            })
            .collect()
    }
}

impl PplScorer for ScoreClient {
    /// Scores in batches of `batch_size`; batches run concurrently up to the
    /// endpoint's permit count, results stay aligned with `texts`.
    fn score_ppl(&self, texts: &[String]) -> Result<Vec<f64>, ClientError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let batches: Vec<Result<Vec<f64>, ClientError>> = texts
            .par_chunks(self.batch_size)
            .map(|chunk| self.score_batch(chunk))
            .collect();
        let mut out = Vec::with_capacity(texts.len());
        for b in batches {
            out.extend(b?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierResponse {
    pub labels: Vec<String>,
    pub confidences: Vec<f64>,
}

#[derive(Debug)]
pub struct ClassifierClient {
    endpoint: Endpoint,
}

impl ClassifierClient {
    pub fn new(endpoint: Endpoint) -> Self {
        ClassifierClient { endpoint }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn classify(&self, texts: &[String], language: &str) -> Result<ClassifierResponse, ClientError> {
        let resp = self
            .endpoint
            .post_json(CLASSIFY_PATH, &json!({ "texts": texts, "language": language }))?;
        let parsed: ClassifierResponse = serde_json::from_value(resp).map_err(|e| ClientError::Malformed {
            endpoint: self.endpoint.label(CLASSIFY_PATH),
            message: e.to_string(),
        })?;
        for actual in [parsed.labels.len(), parsed.confidences.len()] {
            if actual != texts.len() {
                return Err(ClientError::LengthMismatch {
                    endpoint: self.endpoint.label(CLASSIFY_PATH),
                    expected: texts.len(),
                    actual,
                });
            }
        }
        Ok(parsed)
    }
}
