//! The experience library: an append-only, exact cosine flat index of past
//! misclassifications and the rules induced from them.
//!
//! Keys live in one contiguous `f32` buffer; metadata lives alongside in
//! insertion order, so `entry_id` doubles as the row index. Retrieval is a
//! full scan returning the single best entry at or above the threshold, with
//! ties going to the smallest `entry_id`.
//!
//! On-disk layout (little-endian):
//!
//! ```text
//! magic        8   "EXPLIB\0\0"
//! version      u32
//! dim          u32
//! count        u64
//! fp_len       u16
//! fingerprint  fp_len bytes, UTF-8 (embedder identity)
//! checksum     32  SHA-256 of every other byte in the file
//! vectors      count * dim * f32
//! metadata     count * (u32 length + JSON object)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::RuleText;
use crate::embedding::{Embedder, FlowEmbedding};
use crate::flow::{ClassLabel, ClassSet};

pub const MAGIC: &[u8; 8] = b"EXPLIB\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Default similarity threshold.
pub const DEFAULT_TAU: f64 = 0.5;

/// Libraries at least this large are scanned in parallel shards.
const PARALLEL_SCAN_MIN: usize = 8192;

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("dimension mismatch: library has {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("library is read-only")]
    ReadOnlyLibrary,
    #[error("rule text is empty")]
    EmptyRule,
    #[error("threshold {0} outside [-1, 1]")]
    InvalidThreshold(f64),
    #[error("created_seq {found} precedes last entry's {last}")]
    SequenceRegression { last: u64, found: u64 },
    #[error("not a library file")]
    NotALibrary,
    #[error("format version {found} is not supported (expected {expected})")]
    FormatVersionMismatch { expected: u32, found: u32 },
    #[error("checksum verification failed (file truncated or corrupted)")]
    ChecksumFailure,
    #[error("library dimension {header} does not match embedder dimension {expected}")]
    DimensionHeaderMismatch { header: usize, expected: usize },
    #[error("library was built with embedder `{header}`, current embedder is `{current}`")]
    FingerprintMismatch { header: String, current: String },
    #[error("corrupt library: {0}")]
    Corrupt(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One stored experience.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperienceEntry {
    pub entry_id: u64,
    pub key: FlowEmbedding,
    pub rule: RuleText,
    pub predicted: ClassLabel,
    pub actual: ClassLabel,
    pub source_flow_id: u64,
    pub created_seq: u64,
}

/// Fields supplied by the caller on insert; the library assigns `entry_id`.
#[derive(Clone, Debug)]
pub struct NewEntry {
    pub key: FlowEmbedding,
    pub rule: RuleText,
    pub predicted: ClassLabel,
    pub actual: ClassLabel,
    pub source_flow_id: u64,
    pub created_seq: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EntryMeta {
    entry_id: u64,
    rule: RuleText,
    predicted: ClassLabel,
    actual: ClassLabel,
    source_flow_id: u64,
    created_seq: u64,
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum RetrievalResult {
    Hit { entry: ExperienceEntry, similarity: f64 },
    NoContext,
}

impl RetrievalResult {
    pub fn similarity(&self) -> Option<f64> {
        match self {
            RetrievalResult::Hit { similarity, .. } => Some(*similarity),
            RetrievalResult::NoContext => None,
        }
    }

    pub fn entry(&self) -> Option<&ExperienceEntry> {
        match self {
            RetrievalResult::Hit { entry, .. } => Some(entry),
            RetrievalResult::NoContext => None,
        }
    }

    pub fn is_hit(&self) -> bool {
        matches!(self, RetrievalResult::Hit { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRuleCount {
    pub class: String,
    pub rules: u64,
}

/// Rule counts grouped by each entry's true label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryStats {
    pub classes: Vec<ClassRuleCount>,
    pub total: u64,
}

impl LibraryStats {
    /// Two-column text table with thousands separators.
    pub fn render(&self) -> String {
        let width = self.classes.iter().map(|c| c.class.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}  {:>8}\n", "Class", "Rules");
        for c in &self.classes {
            out.push_str(&format!("{:<width$}  {:>8}\n", c.class, thousands(c.rules)));
        }
        out.push_str(&format!("{:<width$}  {:>8}\n", "Total", thousands(self.total)));
        out
    }
}

pub fn thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Cosine similarity. Unit-norm inputs reduce to a dot product (accumulated in
/// `f64`); a zero-sentinel input has similarity -1.
pub fn cosine(a: &FlowEmbedding, b: &FlowEmbedding) -> Result<f64, LibraryError> {
    if a.dim() != b.dim() {
        return Err(LibraryError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    if a.is_zero_sentinel() || b.is_zero_sentinel() {
        return Ok(-1.0);
    }
    Ok(dot(a.values(), b.values()))
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Better of two candidates: higher similarity, then smaller id.
#[inline]
fn better(a: Option<(f64, usize)>, b: Option<(f64, usize)>) -> Option<(f64, usize)> {
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some(x), Some(y)) => {
            if y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) {
                Some(y)
            } else {
                Some(x)
            }
        }
    }
}

pub struct ExperienceLibrary {
    dim: usize,
    fingerprint: String,
    vectors: Vec<f32>,
    sentinel: Vec<bool>,
    meta: Vec<EntryMeta>,
    read_only: bool,
}

impl ExperienceLibrary {
    pub fn new(dim: usize, fingerprint: impl Into<String>) -> Self {
        ExperienceLibrary {
            dim,
            fingerprint: fingerprint.into(),
            vectors: Vec::new(),
            sentinel: Vec::new(),
            meta: Vec::new(),
            read_only: false,
        }
    }

    pub fn for_embedder(embedder: &dyn Embedder) -> Self {
        Self::new(embedder.dim(), embedder.fingerprint())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn is_read_only(&self) -> bool {
        self.read_only
    }

    /// Forbid further inserts.
    pub fn freeze(&mut self) {
        self.read_only = true;
    }

    /// Append one entry. Existing entries are never touched.
    pub fn insert(&mut self, new: NewEntry) -> Result<u64, LibraryError> {
        if self.read_only {
            return Err(LibraryError::ReadOnlyLibrary);
        }
        if new.key.dim() != self.dim {
            return Err(LibraryError::DimensionMismatch {
                expected: self.dim,
                found: new.key.dim(),
            });
        }
        if new.rule.text.trim().is_empty() {
            return Err(LibraryError::EmptyRule);
        }
        if let Some(last) = self.meta.last() {
            if new.created_seq < last.created_seq {
                return Err(LibraryError::SequenceRegression {
                    last: last.created_seq,
                    found: new.created_seq,
                });
            }
        }
        let entry_id = self.meta.len() as u64;
        self.vectors.extend_from_slice(new.key.values());
        self.sentinel.push(new.key.is_zero_sentinel());
        self.meta.push(EntryMeta {
            entry_id,
            rule: new.rule,
            predicted: new.predicted,
            actual: new.actual,
            source_flow_id: new.source_flow_id,
            created_seq: new.created_seq,
        });
        Ok(entry_id)
    }

    pub fn key(&self, entry_id: u64) -> Option<&[f32]> {
        let i = entry_id as usize;
        (i < self.meta.len()).then(|| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn get(&self, entry_id: u64) -> Option<ExperienceEntry> {
        let i = entry_id as usize;
        let m = self.meta.get(i)?;
        let values = self.key(entry_id)?.to_vec();
        Some(ExperienceEntry {
            entry_id: m.entry_id,
            key: FlowEmbedding::from_stored(values),
            rule: m.rule.clone(),
            predicted: m.predicted.clone(),
            actual: m.actual.clone(),
            source_flow_id: m.source_flow_id,
            created_seq: m.created_seq,
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = ExperienceEntry> + '_ {
        (0..self.meta.len() as u64).map(move |i| self.get(i).expect("in range"))
    }

    fn check_query(&self, query: &FlowEmbedding, tau: f64) -> Result<(), LibraryError> {
        if query.dim() != self.dim {
            return Err(LibraryError::DimensionMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        if !(-1.0..=1.0).contains(&tau) || tau.is_nan() {
            return Err(LibraryError::InvalidThreshold(tau));
        }
        Ok(())
    }

    fn scan_range(&self, q: &[f32], range: std::ops::Range<usize>) -> Option<(f64, usize)> {
        let mut best = None;
        for i in range {
            if self.sentinel[i] {
                continue;
            }
            let s = dot(q, &self.vectors[i * self.dim..(i + 1) * self.dim]);
            best = better(best, Some((s, i)));
        }
        best
    }

    /// Best entry over the whole library, ignoring the threshold.
    fn best_match(&self, q: &[f32]) -> Option<(f64, usize)> {
        let n = self.meta.len();
        if n < PARALLEL_SCAN_MIN {
            return self.scan_range(q, 0..n);
        }
        let shard = n.div_ceil(rayon::current_num_threads().max(1)).max(1024);
        (0..n)
            .step_by(shard)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|start| self.scan_range(q, start..(start + shard).min(n)))
            .reduce(|| None, better)
    }

    /// Highest-similarity entry if it reaches `tau`, else `NoContext`.
    pub fn retrieve(&self, query: &FlowEmbedding, tau: f64) -> Result<RetrievalResult, LibraryError> {
        self.check_query(query, tau)?;
        if query.is_zero_sentinel() {
            return Ok(RetrievalResult::NoContext);
        }
        Ok(match self.best_match(query.values()) {
            Some((similarity, i)) if similarity >= tau => RetrievalResult::Hit {
                entry: self.get(i as u64).expect("scanned index"),
                similarity,
            },
            _ => RetrievalResult::NoContext,
        })
    }

    /// Up to `k` entries at or above `tau`, best first, ties by `entry_id`.
    pub fn retrieve_top_k(&self, query: &FlowEmbedding, tau: f64, k: usize) -> Result<Vec<(u64, f64)>, LibraryError> {
        self.check_query(query, tau)?;
        if query.is_zero_sentinel() || k == 0 {
            return Ok(Vec::new());
        }
        let q = query.values();
        let mut scored: Vec<(u64, f64)> = (0..self.meta.len())
            .filter(|&i| !self.sentinel[i])
            .map(|i| (i as u64, dot(q, &self.vectors[i * self.dim..(i + 1) * self.dim])))
            .filter(|(_, s)| *s >= tau)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Rule counts by true label: configured classes first (in order, zeros
    /// included), then any other labels by their literal text.
    pub fn stats(&self, classes: &ClassSet) -> LibraryStats {
        let mut counts: Vec<ClassRuleCount> = classes
            .names()
            .iter()
            .map(|n| ClassRuleCount {
                class: n.clone(),
                rules: 0,
            })
            .collect();
        let mut other: std::collections::BTreeMap<String, u64> = Default::default();
        for m in &self.meta {
            match classes.index_of(&m.actual) {
                Some(i) => counts[i].rules += 1,
                None => *other.entry(m.actual.name().to_string()).or_default() += 1,
            }
        }
        counts.extend(other.into_iter().map(|(class, rules)| ClassRuleCount { class, rules }));
        LibraryStats {
            classes: counts,
            total: self.meta.len() as u64,
        }
    }

    // -----------------------------------------------------------------------
    // Persistence

    fn header_without_checksum(&self) -> Vec<u8> {
        let fp = self.fingerprint.as_bytes();
        let mut h = Vec::with_capacity(26 + fp.len());
        h.extend_from_slice(MAGIC);
        h.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        h.extend_from_slice(&(self.dim as u32).to_le_bytes());
        h.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        h.extend_from_slice(&(fp.len() as u16).to_le_bytes());
        h.extend_from_slice(fp);
        h
    }

    fn body(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.vectors.len() * 4 + self.meta.len() * 256);
        for v in &self.vectors {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for m in &self.meta {
            let json = serde_json::to_vec(m).expect("metadata serialization");
            b.extend_from_slice(&(json.len() as u32).to_le_bytes());
            b.extend_from_slice(&json);
        }
        b
    }

    /// The exact bytes `save` writes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_without_checksum();
        let body = self.body();
        let mut hasher = Sha256::new();
        hasher.update(&header);
        hasher.update(&body);
        let digest = hasher.finalize();
        let mut out = Vec::with_capacity(header.len() + 32 + body.len());
        out.extend_from_slice(&header);
        out.extend_from_slice(&digest);
        out.extend_from_slice(&body);
        out
    }

    /// Hex SHA-256 of the serialized library.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<(), LibraryError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LibraryError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn load_read_only(path: &Path) -> Result<Self, LibraryError> {
        let mut lib = Self::load(path)?;
        lib.freeze();
        Ok(lib)
    }

    /// Fail unless stored keys came from an embedder like `embedder`.
    pub fn check_compatible(&self, embedder: &dyn Embedder) -> Result<(), LibraryError> {
        if self.dim != embedder.dim() {
            return Err(LibraryError::DimensionHeaderMismatch {
                header: self.dim,
                expected: embedder.dim(),
            });
        }
        if self.fingerprint != embedder.fingerprint() {
            return Err(LibraryError::FingerprintMismatch {
                header: self.fingerprint.clone(),
                current: embedder.fingerprint(),
            });
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LibraryError> {
        const FIXED: usize = 8 + 4 + 4 + 8 + 2;
        if bytes.len() < 8 {
            return Err(LibraryError::ChecksumFailure);
        }
        if &bytes[..8] != MAGIC {
            return Err(LibraryError::NotALibrary);
        }
        if bytes.len() < FIXED {
            return Err(LibraryError::ChecksumFailure);
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(LibraryError::FormatVersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let dim = u32_at(12) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let fp_len = u16::from_le_bytes(bytes[24..26].try_into().unwrap()) as usize;
        let header_end = FIXED + fp_len;
        if bytes.len() < header_end + 32 {
            return Err(LibraryError::ChecksumFailure);
        }
        let stored = &bytes[header_end..header_end + 32];
        let body = &bytes[header_end + 32..];
        let mut hasher = Sha256::new();
        hasher.update(&bytes[..header_end]);
        hasher.update(body);
        if hasher.finalize().as_slice() != stored {
            return Err(LibraryError::ChecksumFailure);
        }
        let fingerprint = std::str::from_utf8(&bytes[FIXED..header_end])
            .map_err(|_| LibraryError::Corrupt("fingerprint is not UTF-8".into()))?
            .to_string();

        let vec_bytes = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .filter(|n| *n <= body.len())
            .ok_or_else(|| LibraryError::Corrupt("vector block exceeds file".into()))?;
        let vectors: Vec<f32> = body[..vec_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut meta = Vec::with_capacity(count);
        let mut off = vec_bytes;
        for i in 0..count {
            if off + 4 > body.len() {
                return Err(LibraryError::Corrupt(format!("metadata for entry {i} missing")));
            }
            let len = u32::from_le_bytes(body[off..off + 4].try_into().unwrap()) as usize;
            off += 4;
            let json = body
                .get(off..off + len)
                .ok_or_else(|| LibraryError::Corrupt(format!("metadata for entry {i} truncated")))?;
            let m: EntryMeta = serde_json::from_slice(json)
                .map_err(|e| LibraryError::Corrupt(format!("entry {i} metadata: {e}")))?;
            if m.entry_id != i as u64 {
                return Err(LibraryError::Corrupt(format!("entry {i} carries id {}", m.entry_id)));
            }
            meta.push(m);
            off += len;
        }
        if off != body.len() {
            return Err(LibraryError::Corrupt("trailing bytes after metadata".into()));
        }
        let sentinel = (0..count)
            .map(|i| vectors[i * dim..(i + 1) * dim].iter().all(|v| *v == 0.0))
            .collect();
        Ok(ExperienceLibrary {
            dim,
            fingerprint,
            vectors,
            sentinel,
            meta,
            read_only: false,
        })
    }
}
