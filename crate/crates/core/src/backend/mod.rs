//! Model gateway: every chat and embedding call in the pipeline goes through
//! [`Gateway`], which validates requests, retries transient failures, caps
//! in-flight requests and keeps an audit trail.

mod live;
mod mock;

use std::fs::{File, OpenOptions};
use std::io::{LineWriter, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use live::{LiveBackend, LiveConfig, API_KEY_ENV};
pub use mock::{mock_from_script, MockBackend, MockRule, MockScript};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Evaluation-style request: temperature 0.
    pub fn new(user: impl Into<String>) -> Self {
        ChatRequest {
            system: None,
            user: user.into(),
            temperature: 0.0,
            max_tokens: 512,
            seed: None,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.user.trim().is_empty() {
            return Err(Error::Precondition("chat prompt is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Precondition(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::Precondition("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    pub latency: Duration,
}

/// A non-zero embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("embedding has zero dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("embedding contains non-finite values".into()));
        }
        let norm_sq: f64 = values.iter().map(|v| v * v).sum();
        if norm_sq <= 0.0 {
            return Err(Error::Validation("embedding has zero norm".into()));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A model provider. Implementations report transport problems as
/// [`Error::Transport`] or [`Error::Backend`]; the gateway decides what to retry.
pub trait Backend: Send + Sync {
    fn id(&self) -> String;

    fn chat(&self, req: &ChatRequest) -> Result<String>;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;

    /// Cheap reachability check run once before a pipeline starts.
    fn probe(&self) -> Result<()> {
        Ok(())
    }

    /// Whether repeated identical call sequences give identical answers.
    fn is_deterministic(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Extra attempts after the first one.
    pub retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 2,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            retries: 0,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            jitter: false,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(2u32.saturating_pow(attempt))
            .min(self.max_delay);
        if self.jitter && !exp.is_zero() {
            let extra = rand::rng().random_range(0..=exp.as_millis() as u64 / 2);
            exp + Duration::from_millis(extra)
        } else {
            exp
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    Chat,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    /// Milliseconds since the Unix epoch.
    pub ts: u64,
    pub kind: CallKind,
    pub prompt_sha256: String,
    pub response_sha256: String,
    pub latency_ms: u64,
}

#[derive(Default)]
struct AuditLog {
    records: Mutex<Vec<AuditRecord>>,
    sink: Mutex<Option<LineWriter<File>>>,
}

impl AuditLog {
    fn push(&self, record: AuditRecord) {
        if let Some(sink) = self.sink.lock().unwrap().as_mut() {
            let line = serde_json::to_string(&record).expect("audit record serializes");
            if let Err(e) = writeln!(sink, "{line}") {
                log::warn!("audit log write failed: {e}");
            }
        }
        self.records.lock().unwrap().push(record);
    }
}

struct InFlight {
    max: usize,
    active: Mutex<usize>,
    released: Condvar,
}

struct Slot<'a>(&'a InFlight);

impl InFlight {
    fn new(max: usize) -> Self {
        InFlight {
            max: max.max(1),
            active: Mutex::new(0),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> Slot<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.max {
            active = self.released.wait(active).unwrap();
        }
        *active += 1;
        Slot(self)
    }
}

impl Drop for Slot<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.released.notify_one();
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    batch_size: usize,
    in_flight: InFlight,
    audit: AuditLog,
    dim: OnceLock<usize>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Gateway {
            backend,
            retry: RetryPolicy::default(),
            batch_size: 64,
            in_flight: InFlight::new(8),
            audit: AuditLog::default(),
            dim: OnceLock::new(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.in_flight = InFlight::new(max);
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    /// Also append audit records to `path` as line-delimited JSON.
    pub fn with_audit_file(self, path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        *self.audit.sink.lock().unwrap() = Some(LineWriter::new(file));
        Ok(self)
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn is_deterministic(&self) -> bool {
        self.backend.is_deterministic()
    }

    pub fn probe(&self) -> Result<()> {
        self.backend.probe()
    }

    pub fn audit_records(&self) -> Vec<AuditRecord> {
        self.audit.records.lock().unwrap().clone()
    }

    pub fn call_count(&self, kind: CallKind) -> usize {
        self.audit
            .records
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.kind == kind)
            .count()
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<ChatResponse> {
        req.validate()?;
        let started = Instant::now();
        let text = self.with_retries(|| self.backend.chat(req))?;
        let latency = started.elapsed();
        self.audit.push(AuditRecord {
            ts: now_ms(),
            kind: CallKind::Chat,
            prompt_sha256: sha256_hex(req.user.as_bytes()),
            response_sha256: sha256_hex(text.as_bytes()),
            latency_ms: latency.as_millis() as u64,
        });
        Ok(ChatResponse {
            text,
            backend_id: self.backend.id(),
            latency,
        })
    }

    /// One vector per input text, in input order.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::Precondition("nothing to embed".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(Error::Precondition(format!("embedding input {i} is empty")));
        }
        let started = Instant::now();
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.batch_size) {
            let raw = self.with_retries(|| self.backend.embed(batch))?;
            if raw.len() != batch.len() {
                return Err(Error::Validation(format!(
                    "backend returned {} embeddings for {} inputs",
                    raw.len(),
                    batch.len()
                )));
            }
            for values in raw {
                let vector = EmbeddingVector::new(values)?;
                let dim = *self.dim.get_or_init(|| vector.dim());
                if vector.dim() != dim {
                    return Err(Error::Validation(format!(
                        "embedding dimension changed from {dim} to {}",
                        vector.dim()
                    )));
                }
                out.push(vector);
            }
        }
        let mut hasher = Sha256::new();
        for v in &out {
            for x in v.values() {
                hasher.update(x.to_le_bytes());
            }
        }
        self.audit.push(AuditRecord {
            ts: now_ms(),
            kind: CallKind::Embed,
            prompt_sha256: sha256_hex(texts.join("\n").as_bytes()),
            response_sha256: hex::encode(hasher.finalize()),
            latency_ms: started.elapsed().as_millis() as u64,
        });
        Ok(out)
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T>) -> Result<T> {
        let _slot = self.in_flight.acquire();
        let mut attempt = 0;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt < self.retry.retries => {
                    let delay = self.retry.delay(attempt);
                    log::warn!(
                        "backend call failed (attempt {}/{}): {e}; retrying in {:?}",
                        attempt + 1,
                        self.retry.retries + 1,
                        delay
                    );
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(Error::Transport { message, .. }) => {
                    return Err(Error::Transport {
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
