//! Wire contracts for the three external model roles (chat generation,
//! judging via chat, text embedding) plus deterministic offline mocks.
//!
//! Every consumer programs against `ChatClient`/`EmbedClient`; whether the
//! other end is a hosted model or an in-process mock is configuration.

mod mock;
mod remote;

pub use mock::{
    mock_bucket, mock_embed, MockChat, MockEmbed, ScriptedStep, ScriptedTransport,
    MOCK_EMBED_DIMS,
};
pub use remote::{HttpTransport, RemoteChat, RemoteEmbed, RetryPolicy, TransportFailure, UreqTransport};

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport failure (status {status})")]
    Transport { status: u16 },
    #[error("request timed out")]
    Timeout,
    #[error("call budget exceeded")]
    BudgetExceeded,
    #[error("embedding dims differ: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("flagged zero vector has no direction")]
    ZeroVector,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurnMsg {
    pub role: Role,
    pub content: String,
}

impl ChatTurnMsg {
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: u32,
}

impl GenParams {
    pub fn doctor_default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_len: 2048,
        }
    }

    pub fn patient_default() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_len: 512,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0,1], got {}", self.top_p));
        }
        if self.max_len == 0 {
            return Err("max_len must be positive".to_string());
        }
        Ok(())
    }
}

const UNIT_NORM_TOL: f64 = 1e-9;

/// A unit-normalized embedding. All-stopword input produces the flagged
/// zero vector, which no similarity may be computed against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
    zero: bool,
}

impl EmbeddingVector {
    /// L2-normalizes raw bucket counts; a zero input stays zero, flagged.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Self { values, zero: true };
        }
        for v in &mut values {
            *v /= norm;
        }
        Self {
            values,
            zero: false,
        }
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-norm invariant check used when loading persisted vectors.
    pub fn check_unit(&self) -> Result<(), String> {
        if self.zero {
            return Ok(());
        }
        let norm = self.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(format!("vector norm {norm} not within 1e-9 of 1"));
        }
        Ok(())
    }
}

// Persisted form is the bare value array; the flag is recomputed.
impl From<Vec<f64>> for EmbeddingVector {
    fn from(values: Vec<f64>) -> Self {
        let zero = values.iter().all(|v| *v == 0.0);
        Self { values, zero }
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Vec<f64> {
        v.values
    }
}

/// Inner product of two unit vectors.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, ClientError> {
    if a.dims() != b.dims() {
        return Err(ClientError::DimMismatch {
            a: a.dims(),
            b: b.dims(),
        });
    }
    if a.zero || b.zero {
        return Err(ClientError::ZeroVector);
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x * y)
        .sum())
}

/// Shared decrementing call cap. Cloning shares the same counter so one
/// budget can cover several role clients.
#[derive(Debug, Clone, Default)]
pub struct CallBudget(Option<Arc<AtomicI64>>);

impl CallBudget {
    pub fn unlimited() -> Self {
        Self(None)
    }

    pub fn calls(n: u64) -> Self {
        Self(Some(Arc::new(AtomicI64::new(n as i64))))
    }

    pub fn try_take(&self) -> Result<(), ClientError> {
        match &self.0 {
            None => Ok(()),
            Some(counter) => {
                if counter.fetch_sub(1, Ordering::SeqCst) > 0 {
                    Ok(())
                } else {
                    Err(ClientError::BudgetExceeded)
                }
            }
        }
    }
}

pub trait ChatClient: Send + Sync {
    /// Returns one completion. Implementations must be safe to retry on
    /// transport failure; the idempotency key travels with the request.
    fn chat(
        &self,
        messages: &[ChatTurnMsg],
        params: &GenParams,
        idempotency_key: &str,
    ) -> Result<String, ClientError>;
}

pub trait EmbedClient: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, ClientError>;
    fn dims(&self) -> usize;
    fn backend_name(&self) -> &str;
    /// Stable hash of (backend name, dims, hash function id); persisted in
    /// bank indexes so stale vectors are refused at load time.
    fn fingerprint(&self) -> u64;
}
