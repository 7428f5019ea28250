//! HTTP-backed chat and embedding clients.
//!
//! Wire shape: POST `{chat_url}` with `{model, messages, temperature,
//! top_p, max_tokens, idempotency_key}` returning `{"completion": text}`;
//! POST `{embed_url}` with `{model, input}` returning `{"vector": [...]}`.
//! Transport discipline: bounded in-flight requests, exponential backoff
//! retries on 429/5xx/network failures, no retry on other 4xx.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    CallBudget, ChatClient, ChatTurnMsg, ClientError, EmbedClient, EmbeddingVector, GenParams,
};
use crate::util::fnv1a_64_str;

#[derive(Debug, thiserror::Error)]
pub enum TransportFailure {
    #[error("timed out")]
    Timeout,
    #[error("io failure: {0}")]
    Io(String),
}

/// One HTTP POST exchange. Swappable so tests can script status sequences.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        timeout: Duration,
        api_key: Option<&str>,
    ) -> Result<(u16, Value), TransportFailure>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new() -> Self {
        Self {
            agent: ureq::AgentBuilder::new().build(),
        }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        timeout: Duration,
        api_key: Option<&str>,
    ) -> Result<(u16, Value), TransportFailure> {
        let mut req = self.agent.post(url).timeout(timeout);
        if let Some(key) = api_key {
            req = req.set("authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(resp) => {
                let status = resp.status();
                let value = resp
                    .into_json()
                    .map_err(|e| TransportFailure::Io(e.to_string()))?;
                Ok((status, value))
            }
            Err(ureq::Error::Status(status, resp)) => {
                Ok((status, resp.into_json().unwrap_or(Value::Null)))
            }
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") {
                    Err(TransportFailure::Timeout)
                } else {
                    Err(TransportFailure::Io(msg))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub cap: Duration,
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_millis(200),
            cap: Duration::from_secs(5),
            max_retries: 3,
        }
    }
}

impl RetryPolicy {
    /// Zero-delay policy for tests.
    pub fn instant(max_retries: u32) -> Self {
        Self {
            base: Duration::ZERO,
            cap: Duration::ZERO,
            max_retries,
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.saturating_sub(1));
        self.base.saturating_mul(factor).min(self.cap)
    }
}

/// Counting gate bounding concurrent in-flight requests per backend.
struct Gate {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(cap: usize) -> Arc<Self> {
        Arc::new(Self {
            permits: Mutex::new(cap.max(1)),
            cv: Condvar::new(),
        })
    }

    fn acquire(self: &Arc<Self>) -> GateGuard {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        GateGuard { gate: Arc::clone(self) }
    }
}

struct GateGuard {
    gate: Arc<Gate>,
}

impl Drop for GateGuard {
    fn drop(&mut self) {
        *self.gate.permits.lock().unwrap() += 1;
        self.gate.cv.notify_one();
    }
}

pub const DEFAULT_INFLIGHT_CAP: usize = 8;
const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(60);

fn post_with_retry(
    transport: &dyn HttpTransport,
    url: &str,
    body: &Value,
    timeout: Duration,
    api_key: Option<&str>,
    retry: &RetryPolicy,
) -> Result<Value, ClientError> {
    let mut attempt = 0u32;
    loop {
        let failure = match transport.post_json(url, body, timeout, api_key) {
            Ok((status, value)) if (200..300).contains(&status) => return Ok(value),
            Ok((status, _)) if status == 429 || (500..600).contains(&status) => {
                ClientError::Transport { status }
            }
            Ok((status, _)) => return Err(ClientError::Transport { status }),
            Err(TransportFailure::Timeout) => ClientError::Timeout,
            Err(TransportFailure::Io(_)) => ClientError::Transport { status: 0 },
        };
        if attempt >= retry.max_retries {
            return Err(failure);
        }
        attempt += 1;
        let delay = retry.backoff(attempt);
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
    }
}

pub struct RemoteChat {
    transport: Arc<dyn HttpTransport>,
    url: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
    retry: RetryPolicy,
    gate: Arc<Gate>,
    budget: CallBudget,
}

impl RemoteChat {
    pub fn new(
        transport: Arc<dyn HttpTransport>,
        url: impl Into<String>,
        model: impl Into<String>,
    ) -> Self {
        Self {
            transport,
            url: url.into(),
            model: model.into(),
            api_key: None,
            timeout: DEFAULT_REQUEST_TIMEOUT,
            retry: RetryPolicy::default(),
            gate: Gate::new(DEFAULT_INFLIGHT_CAP),
            budget: CallBudget::unlimited(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_inflight_cap(mut self, cap: usize) -> Self {
        self.gate = Gate::new(cap);
        self
    }

    pub fn with_budget(mut self, budget: CallBudget) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl ChatClient for RemoteChat {
    fn chat(
        &self,
        messages: &[ChatTurnMsg],
        params: &GenParams,
        idempotency_key: &str,
    ) -> Result<String, ClientError> {
        if messages.is_empty() {
            return Err(ClientError::InvalidRequest("empty message list".into()));
        }
        self.budget.try_take()?;
        let _slot = self.gate.acquire();
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_len,
            "idempotency_key": idempotency_key,
        });
        let value = post_with_retry(
            self.transport.as_ref(),
            &self.url,
            &body,
            self.timeout,
            self.api_key.as_deref(),
            &self.retry,
        )?;
        value
            .get("completion")
            .and_then(Value::as_str)
            .map(String::from)
            .ok_or_else(|| ClientError::BadResponse("missing completion field".into()))
    }
}

pub struct RemoteEmbed {
    transport: Arc<dyn HttpTransport>,
    url: String,
    model: String,
    dims: usize,
    api_key: Option<String>,
    timeout: Duration,
    retry: RetryPolicy,
    gate: Arc<Gate>,
}

impl RemoteEmbed {
    pub fn new(
        transport: Arc<dyn HttpTransport>,
        url: impl Into<String>,
        model: impl Into<String>,
        dims: usize,
    ) -> Self {
        Self {
            transport,
            url: url.into(),
            model: model.into(),
            dims,
            api_key: None,
            timeout: DEFAULT_REQUEST_TIMEOUT,
            retry: RetryPolicy::default(),
            gate: Gate::new(DEFAULT_INFLIGHT_CAP),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl EmbedClient for RemoteEmbed {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, ClientError> {
        let _slot = self.gate.acquire();
        let body = json!({ "model": self.model, "input": text });
        let value = post_with_retry(
            self.transport.as_ref(),
            &self.url,
            &body,
            self.timeout,
            self.api_key.as_deref(),
            &self.retry,
        )?;
        let raw: Vec<f64> = value
            .get("vector")
            .and_then(Value::as_array)
            .ok_or_else(|| ClientError::BadResponse("missing vector field".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| ClientError::BadResponse("non-numeric vector entry".into())))
            .collect::<Result<_, _>>()?;
        if raw.len() != self.dims {
            return Err(ClientError::BadResponse(format!(
                "expected {} dims, got {}",
                self.dims,
                raw.len()
            )));
        }
        Ok(EmbeddingVector::normalized(raw))
    }

    fn dims(&self) -> usize {
        self.dims
    }

    fn backend_name(&self) -> &str {
        "remote-embed"
    }

    fn fingerprint(&self) -> u64 {
        fnv1a_64_str(&format!("remote-embed:{}|{}|model", self.model, self.dims))
    }
}
