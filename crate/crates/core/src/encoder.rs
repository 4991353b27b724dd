//! Transcript text to 768-dimensional contextual embeddings.

use std::time::Duration;

use crate::cache::FileCache;
use crate::error::{Error, Result};
use crate::hash::{fnv1a64, hex_key, Fnv1a64};

pub const EMBEDDING_DIM: usize = 768;
/// Texts are cut to this many whitespace tokens before encoding.
pub const MAX_TOKENS: usize = 512;

/// A 768-float vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Dimension {
                expected: EMBEDDING_DIM,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("embedding entry {i} is {}", values[i])));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; EMBEDDING_DIM])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait EncoderBackend: Send + Sync {
    /// Identifies the backend in cache keys.
    fn name(&self) -> &str;

    fn encode_raw(&self, text: &str) -> Result<Vec<f64>>;
}

/// Signed feature hashing over lowercase alphanumeric tokens, L2-normalized.
/// Order-free by construction.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEncoder;

impl EncoderBackend for MockEncoder {
    fn name(&self) -> &str {
        "mock"
    }

    fn encode_raw(&self, text: &str) -> Result<Vec<f64>> {
        Ok(mock_encode(text).into_values())
    }
}

pub fn mock_encode(text: &str) -> Embedding {
    let mut values = vec![0.0; EMBEDDING_DIM];
    let lower = text.to_lowercase();
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let (index, sign) = hashed_slot(token);
        values[index] += sign;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    }
    Embedding(values)
}

/// Bucket and sign of one token: `h mod 768`, negative when the top bit is set.
pub fn hashed_slot(token: &str) -> (usize, f64) {
    let h = fnv1a64(token.as_bytes());
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    ((h % EMBEDDING_DIM as u64) as usize, sign)
}

/// Out-of-process encoder: text on stdin, 768 whitespace-separated floats on
/// stdout.
#[derive(Debug, Clone)]
pub struct ExternalEncoder {
    command: String,
    name: String,
    timeout: Duration,
}

impl ExternalEncoder {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        let command = command.into();
        Self {
            name: format!("external:{command}"),
            command,
            timeout,
        }
    }
}

impl EncoderBackend for ExternalEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn encode_raw(&self, text: &str) -> Result<Vec<f64>> {
        let out = crate::external::run(&self.command, &[], Some(text.as_bytes()), self.timeout)?;
        crate::external::parse_floats(&out)
    }
}

/// First `MAX_TOKENS` whitespace tokens, re-joined with single spaces.
pub fn truncate_tokens(text: &str) -> String {
    text.split_whitespace().take(MAX_TOKENS).collect::<Vec<_>>().join(" ")
}

pub fn encode(backend: &dyn EncoderBackend, text: &str) -> Result<Embedding> {
    Embedding::new(backend.encode_raw(&truncate_tokens(text))?)
}

/// FNV-1a-64 of `backend name ++ 0x00 ++ text`.
pub fn embedding_cache_key(backend_name: &str, text: &str) -> String {
    let h = Fnv1a64::new()
        .update(backend_name.as_bytes())
        .update(&[0])
        .update(text.as_bytes())
        .finish();
    hex_key(h)
}

pub fn embedding_cache(dir: impl Into<std::path::PathBuf>) -> FileCache {
    FileCache::new(dir, ".emb.txt")
}

/// Space-separated shortest round-trip decimal representation.
pub fn format_embedding(e: &Embedding) -> String {
    e.values().iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

pub fn parse_embedding(text: &str) -> Result<Embedding> {
    Embedding::new(crate::external::parse_floats(text.as_bytes())?)
}

pub fn embedding_cache_lookup(cache: &FileCache, key: &str) -> Option<Embedding> {
    cache.lookup(key).and_then(|t| parse_embedding(&t).ok())
}

pub fn embedding_cache_store(cache: &FileCache, key: &str, e: &Embedding) -> Result<()> {
    cache.store(key, &format_embedding(e))
}
