//! Flow embeddings.
//!
//! Every embedding is L2-normalized at creation so cosine similarity is a plain
//! dot product. Text with no tokens (or a remote all-zero vector) produces the
//! flagged zero sentinel, which the library never returns from retrieval.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::remote::{HttpTransport, InFlightLimiter, JsonTransport, RetryPolicy, TransportError};

pub const DEFAULT_DIM: usize = 384;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch of {len} needs more than {max_requests} requests of {batch_size}")]
    BatchTooLarge {
        len: usize,
        batch_size: usize,
        max_requests: usize,
    },
    #[error("embedding service unavailable: {0}")]
    RemoteUnavailable(TransportError),
    #[error("expected dimension {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("batch failed at index {index}: {source}")]
    BatchFailed {
        index: usize,
        #[source]
        source: Box<EmbeddingError>,
    },
    #[error("invalid embedder configuration: {0}")]
    Config(String),
}

/// A unit-norm embedding, or the flagged all-zero sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowEmbedding {
    values: Vec<f32>,
    zero_sentinel: bool,
}

impl FlowEmbedding {
    /// Normalize raw components. A zero (or non-finite) norm yields the sentinel.
    pub fn from_raw(raw: &[f64]) -> Self {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Self::zero(raw.len());
        }
        FlowEmbedding {
            values: raw.iter().map(|v| (v / norm) as f32).collect(),
            zero_sentinel: false,
        }
    }

    pub fn from_f32(raw: &[f32]) -> Self {
        let wide: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        Self::from_raw(&wide)
    }

    /// Wrap stored components without renormalizing them. Used when loading a
    /// library so vectors stay bitwise-identical.
    pub fn from_stored(values: Vec<f32>) -> Self {
        let zero_sentinel = values.iter().all(|v| *v == 0.0);
        FlowEmbedding { values, zero_sentinel }
    }

    pub fn zero(dim: usize) -> Self {
        FlowEmbedding {
            values: vec![0.0; dim],
            zero_sentinel: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_zero_sentinel(&self) -> bool {
        self.zero_sentinel
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// Something that turns canonical flow JSON into embeddings.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifies the embedding function; stored in library headers so keys
    /// from different embedders are never compared.
    fn fingerprint(&self) -> String;

    fn embed(&self, text: &str) -> Result<FlowEmbedding, EmbeddingError>;

    /// Order-preserving; element `i` equals `embed(texts[i])`.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<FlowEmbedding>, EmbeddingError> {
        if texts.is_empty() {
            return Err(EmbeddingError::EmptyBatch);
        }
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.embed(t).map_err(|e| EmbeddingError::BatchFailed {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Hash embedder

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const SIGN_SALT: u64 = 0x5349_474e_5f53_414c;

/// 64-bit FNV-1a over the seed's little-endian bytes followed by `bytes`.
pub fn seeded_fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    seed.to_le_bytes()
        .iter()
        .chain(bytes)
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Split on non-alphanumeric characters, dropping empty pieces.
pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty())
}

/// Signed feature hashing: each token adds ±1 to bucket `hash(token) mod dim`,
/// with the sign taken from the low bit of a second, salted hash. The result is
/// L2-normalized; no tokens gives the zero sentinel.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> FlowEmbedding {
    assert!(dim >= 2, "hash embedding needs dim >= 2");
    let mut acc = vec![0.0f64; dim];
    for tok in tokenize(text) {
        let bucket = (seeded_fnv1a(seed, tok.as_bytes()) % dim as u64) as usize;
        let sign_bit = seeded_fnv1a(seed ^ SIGN_SALT, tok.as_bytes()) & 1;
        acc[bucket] += if sign_bit == 0 { 1.0 } else { -1.0 };
    }
    FlowEmbedding::from_raw(&acc)
}

/// Deterministic offline embedder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self, EmbeddingError> {
        if dim < 2 {
            return Err(EmbeddingError::Config(format!("hash embedder dim {dim} < 2")));
        }
        Ok(HashEmbedder { dim, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("hash-fnv1a64;dim={};seed={}", self.dim, self.seed)
    }

    fn embed(&self, text: &str) -> Result<FlowEmbedding, EmbeddingError> {
        if text.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        Ok(hash_embed(text, self.dim, self.seed))
    }
}

// ---------------------------------------------------------------------------
// Remote embedder

/// Client for an embeddings API:
/// `{"model", "input": [..]}` → `{"data": [{"embedding": [..]}, ..]}`.
pub struct RemoteEmbedder {
    transport: Box<dyn JsonTransport>,
    model: String,
    dim: usize,
    batch_size: usize,
    max_requests: usize,
    retry: RetryPolicy,
    limiter: InFlightLimiter,
}

impl RemoteEmbedder {
    pub fn new(transport: Box<dyn JsonTransport>, model: &str, dim: usize, batch_size: usize) -> Self {
        RemoteEmbedder {
            transport,
            model: model.to_string(),
            dim,
            batch_size: batch_size.max(1),
            max_requests: 1024,
            retry: RetryPolicy::default(),
            limiter: InFlightLimiter::new(4),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limiter = InFlightLimiter::new(n);
        self
    }

    pub fn with_max_requests(mut self, n: usize) -> Self {
        self.max_requests = n.max(1);
        self
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<FlowEmbedding>, EmbeddingError> {
        let body = json!({ "model": self.model, "input": texts });
        let resp = {
            let _permit = self.limiter.acquire();
            self.retry
                .run(|| self.transport.post_json(&body))
                .map_err(EmbeddingError::RemoteUnavailable)?
        };
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbeddingError::Malformed("missing `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(EmbeddingError::Malformed(format!(
                "{} embeddings for {} inputs",
                data.len(),
                texts.len()
            )));
        }
        let mut items: Vec<(usize, &Value)> = data
            .iter()
            .enumerate()
            .map(|(pos, item)| {
                let idx = item.get("index").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos);
                (idx, item)
            })
            .collect();
        items.sort_by_key(|(idx, _)| *idx);
        items
            .into_iter()
            .map(|(_, item)| {
                let raw: Vec<f64> = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| EmbeddingError::Malformed("missing `embedding`".into()))?
                    .iter()
                    .map(|v| v.as_f64().ok_or_else(|| EmbeddingError::Malformed("non-numeric component".into())))
                    .collect::<Result<_, _>>()?;
                if raw.len() != self.dim {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: self.dim,
                        found: raw.len(),
                    });
                }
                Ok(FlowEmbedding::from_raw(&raw))
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("remote;model={};dim={}", self.model, self.dim)
    }

    fn embed(&self, text: &str) -> Result<FlowEmbedding, EmbeddingError> {
        if text.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        Ok(self.request(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<FlowEmbedding>, EmbeddingError> {
        if texts.is_empty() {
            return Err(EmbeddingError::EmptyBatch);
        }
        if texts.len().div_ceil(self.batch_size) > self.max_requests {
            return Err(EmbeddingError::BatchTooLarge {
                len: texts.len(),
                batch_size: self.batch_size,
                max_requests: self.max_requests,
            });
        }
        if let Some(index) = texts.iter().position(|t| t.is_empty()) {
            return Err(EmbeddingError::BatchFailed {
                index,
                source: Box::new(EmbeddingError::EmptyText),
            });
        }
        let mut out = Vec::with_capacity(texts.len());
        for (chunk_no, chunk) in texts.chunks(self.batch_size).enumerate() {
            let got = self.request(chunk).map_err(|e| EmbeddingError::BatchFailed {
                index: chunk_no * self.batch_size,
                source: Box::new(e),
            })?;
            out.extend(got);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Cache

/// Memoizes embeddings by exact input text for the lifetime of a run.
pub struct CachedEmbedder {
    inner: Arc<dyn Embedder>,
    cache: Mutex<HashMap<String, FlowEmbedding>>,
    misses: AtomicU64,
    hits: AtomicU64,
}

impl CachedEmbedder {
    pub fn new(inner: Arc<dyn Embedder>) -> Self {
        CachedEmbedder {
            inner,
            cache: Mutex::new(HashMap::new()),
            misses: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        }
    }

    /// (hits, misses)
    pub fn counters(&self) -> (u64, u64) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }
}

impl Embedder for CachedEmbedder {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn embed(&self, text: &str) -> Result<FlowEmbedding, EmbeddingError> {
        if let Some(e) = self.cache.lock().unwrap().get(text) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(e.clone());
        }
        let e = self.inner.embed(text)?;
        self.misses.fetch_add(1, Ordering::Relaxed);
        self.cache.lock().unwrap().insert(text.to_string(), e.clone());
        Ok(e)
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hash,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dim: usize,
    /// Hash embedder seed.
    pub seed: u64,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub batch_size: usize,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            kind: EmbedderKind::Hash,
            dim: DEFAULT_DIM,
            seed: 0,
            endpoint: None,
            model_name: None,
            api_key_env: None,
            batch_size: 64,
            timeout_secs: 30,
            max_in_flight: 4,
        }
    }
}

impl EmbedderSpec {
    pub fn build(&self) -> Result<Arc<dyn Embedder>, EmbeddingError> {
        match self.kind {
            EmbedderKind::Hash => Ok(Arc::new(HashEmbedder::new(self.dim, self.seed)?)),
            EmbedderKind::Remote => {
                let endpoint = self
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| EmbeddingError::Config("remote embedder needs `endpoint`".into()))?;
                let model = self
                    .model_name
                    .as_deref()
                    .ok_or_else(|| EmbeddingError::Config("remote embedder needs `model_name`".into()))?;
                let transport =
                    HttpTransport::new(endpoint, self.api_key_env.as_deref(), Duration::from_secs(self.timeout_secs));
                Ok(Arc::new(
                    RemoteEmbedder::new(Box::new(transport), model, self.dim, self.batch_size)
                        .with_max_in_flight(self.max_in_flight),
                ))
            }
        }
    }
}
