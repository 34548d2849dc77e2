//! Chat-model backends behind one interface.
//!
//! A [`Transport`] performs a single attempt. [`Backend`] wraps it with
//! the global in-flight cap and the retry policy, and is shared by all
//! pipeline workers.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tooltraj_core::mock::{mock_generate_with, FaultConfig};
use tooltraj_core::Stage;

use crate::config::{BackendKind, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_id: String,
    /// Pipeline stage, needed by the mock.
    pub stage: Option<Stage>,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn user(stage: Stage, model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        ChatRequest {
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.into(),
            }],
            temperature: 0.0,
            max_tokens: 4096,
            model_id: model_id.into(),
            stage: Some(stage),
            seed: None,
        }
    }

    fn check(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("negative temperature".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Failure of one attempt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttemptError {
    Timeout,
    Status {
        code: u16,
        body: String,
    },
    Connection(String),
    BadResponse(String),
    /// The request cannot be served at all (e.g. the mock got no stage).
    Unsupported(String),
}

impl AttemptError {
    pub fn retryable(&self) -> bool {
        match self {
            AttemptError::Timeout | AttemptError::Connection(_) => true,
            AttemptError::Status { code, .. } => *code == 429 || *code >= 500,
            AttemptError::BadResponse(_) | AttemptError::Unsupported(_) => false,
        }
    }
}

impl fmt::Display for AttemptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttemptError::Timeout => f.write_str("timed out"),
            AttemptError::Status { code, body } => write!(f, "HTTP {code}: {}", truncate(body, 200)),
            AttemptError::Connection(e) => write!(f, "connection error: {e}"),
            AttemptError::BadResponse(e) => write!(f, "unusable response: {e}"),
            AttemptError::Unsupported(e) => write!(f, "unsupported request: {e}"),
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("environment variable `{0}` with the API key is not set")]
    MissingCredential(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("giving up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: AttemptError },
    #[error("request failed: {0}")]
    Fatal(AttemptError),
    #[error("cannot build HTTP client: {0}")]
    Client(String),
}

/// One attempt at a completion. `attempt` counts from 0.
pub trait Transport: Send + Sync {
    fn send(&self, req: &ChatRequest, attempt: u32) -> Result<String, AttemptError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub max: Duration,
}

impl RetryPolicy {
    /// Delay before retry `n` (0-based): `base * 2^n`, capped at `max`.
    pub fn delay(&self, n: u32) -> Duration {
        let factor = 1u32.checked_shl(n.min(31)).unwrap_or(u32::MAX);
        self.base.saturating_mul(factor).min(self.max)
    }
}

/// Counting semaphore.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.gate.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.gate.cv.notify_one();
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackendCounters {
    pub requests: u64,
    pub attempts: u64,
    pub retries: u64,
}

pub type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

pub struct Backend {
    transport: Box<dyn Transport>,
    policy: RetryPolicy,
    gate: Gate,
    sleep: Sleeper,
    requests: AtomicU64,
    attempts: AtomicU64,
    retries: AtomicU64,
}

impl Backend {
    pub fn new(transport: Box<dyn Transport>, policy: RetryPolicy, max_concurrency: usize) -> Self {
        Backend {
            transport,
            policy,
            gate: Gate::new(max_concurrency),
            sleep: Box::new(std::thread::sleep),
            requests: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        }
    }

    /// Replaces the function used to wait between retries.
    pub fn with_sleeper(mut self, sleep: Sleeper) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self, BackendError> {
        let b = &cfg.backend;
        let transport: Box<dyn Transport> = match b.kind {
            BackendKind::Mock => Box::new(MockTransport::new(cfg.seed, cfg.mock.faults())),
            BackendKind::Http => Box::new(HttpTransport::new(
                &b.endpoint_url,
                &b.api_key_env,
                Duration::from_secs(b.timeout_secs),
            )?),
        };
        let policy = RetryPolicy {
            max_retries: b.max_retries,
            base: Duration::from_millis(b.backoff_base_ms),
            max: Duration::from_millis(b.backoff_max_ms),
        };
        Ok(Backend::new(transport, policy, b.max_concurrency))
    }

    pub fn counters(&self) -> BackendCounters {
        BackendCounters {
            requests: self.requests.load(Ordering::Relaxed),
            attempts: self.attempts.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
        }
    }

    /// Returns the model text, retrying transient failures. The in-flight
    /// slot is released while waiting between attempts.
    pub fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.check()?;
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut attempt = 0;
        loop {
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let result = {
                let _slot = self.gate.acquire();
                self.transport.send(req, attempt)
            };
            match result {
                Ok(text) => return Ok(text),
                Err(e) if !e.retryable() => return Err(BackendError::Fatal(e)),
                Err(e) if attempt >= self.policy.max_retries => {
                    return Err(BackendError::Exhausted {
                        attempts: attempt + 1,
                        last: e,
                    })
                }
                Err(e) => {
                    log::debug!("attempt {} failed ({e}); retrying", attempt + 1);
                    (self.sleep)(self.policy.delay(attempt));
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    attempt += 1;
                }
            }
        }
    }
}

/// Deterministic offline model. Output depends on the stage, the last
/// message and the run seed only.
pub struct MockTransport {
    seed: u64,
    faults: FaultConfig,
}

impl MockTransport {
    pub fn new(seed: u64, faults: FaultConfig) -> Self {
        MockTransport { seed, faults }
    }
}

impl Transport for MockTransport {
    fn send(&self, req: &ChatRequest, _attempt: u32) -> Result<String, AttemptError> {
        let stage = req
            .stage
            .ok_or_else(|| AttemptError::Unsupported("mock backend needs a pipeline stage".into()))?;
        let input = req.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        Ok(mock_generate_with(stage, input, self.seed, &self.faults))
    }
}

/// OpenAI-style `/chat/completions` client.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpTransport")
            .field("url", &self.url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpTransport {
    /// Reads the key from the environment variable named `api_key_env`;
    /// an empty name disables authorization.
    pub fn new(url: &str, api_key_env: &str, timeout: Duration) -> Result<Self, BackendError> {
        let api_key = if api_key_env.is_empty() {
            None
        } else {
            match std::env::var(api_key_env) {
                Ok(k) if !k.is_empty() => Some(k),
                _ => return Err(BackendError::MissingCredential(api_key_env.into())),
            }
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Client(e.to_string()))?;
        Ok(HttpTransport {
            client,
            url: url.into(),
            api_key,
        })
    }

    fn body(req: &ChatRequest, attempt: u32) -> Value {
        let mut body = json!({
            "model": req.model_id,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed.wrapping_add(u64::from(attempt)));
        }
        body
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &ChatRequest, attempt: u32) -> Result<String, AttemptError> {
        let mut builder = self.client.post(&self.url).json(&Self::body(req, attempt));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() {
                AttemptError::Timeout
            } else {
                AttemptError::Connection(e.without_url().to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                AttemptError::Timeout
            } else {
                AttemptError::Connection(e.without_url().to_string())
            }
        })?;
        if !status.is_success() {
            return Err(AttemptError::Status {
                code: status.as_u16(),
                body: text,
            });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| AttemptError::BadResponse(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(String::from)
            .ok_or_else(|| AttemptError::BadResponse("no choices[0].message.content".into()))
    }
}
