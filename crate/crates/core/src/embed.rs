//! Rationale embeddings for diversity selection.
//!
//! The default provider hashes case-folded character n-grams into `d`
//! signed buckets and L2-normalizes, so it runs offline and is fully
//! deterministic. An OpenAI-style `/embeddings` endpoint can be used instead.

use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid embedding configuration: {0}")]
    InvalidConfig(String),
    #[error("embedding request failed: {0}")]
    RemoteError(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Rejects non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::InvalidConfig("non-finite embedding entry".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedProvider {
    #[default]
    Hashed,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub provider: EmbedProvider,
    pub dimension: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Texts per request for the http provider.
    pub batch_size: usize,
    /// Requests in flight for the http provider.
    pub concurrency: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            provider: EmbedProvider::Hashed,
            dimension: 256,
            ngram_min: 3,
            ngram_max: 5,
            endpoint: None,
            model: None,
            batch_size: 32,
            concurrency: 4,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension < 2 {
            return Err(EmbedError::InvalidConfig("dimension must be at least 2".into()));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(EmbedError::InvalidConfig(format!(
                "n-gram range {}..{} is empty",
                self.ngram_min, self.ngram_max
            )));
        }
        if self.provider == EmbedProvider::Http && self.endpoint.is_none() {
            return Err(EmbedError::InvalidConfig("http provider needs an endpoint".into()));
        }
        Ok(())
    }
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Signed feature hashing of character n-grams, L2-normalized.
pub fn hashed_ngram_embedding(text: &str, cfg: &EmbedConfig) -> Result<Embedding, EmbedError> {
    cfg.validate()?;
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let d = cfg.dimension;
    let mut v = vec![0.0f64; d];
    let mut add = |gram: &[char]| {
        let s: String = gram.iter().collect();
        let h = fnv64(s.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % d as u64) as usize] += sign;
    };
    if chars.len() < cfg.ngram_min {
        add(&chars);
    } else {
        for n in cfg.ngram_min..=cfg.ngram_max.min(chars.len()) {
            chars.windows(n).for_each(&mut add);
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // every gram cancelled out; fall back to a one-hot of the whole text
        v[(fnv64(text.as_bytes()) % d as u64) as usize] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Embedding::new(v)
}

/// Embeds a batch of texts, preserving order.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError>;
}

#[derive(Debug, Clone, Default)]
pub struct HashedNgramEmbedder {
    pub cfg: EmbedConfig,
}

impl Embedder for HashedNgramEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        texts.iter().map(|t| hashed_ngram_embedding(t, &self.cfg)).collect()
    }
}

#[cfg(feature = "http")]
pub use remote::HttpEmbedder;

#[cfg(feature = "http")]
mod remote {
    use serde_json::{json, Value};

    use super::{EmbedConfig, EmbedError, Embedder, Embedding};
    use crate::http::{post_json, token_from_env, RetryPolicy};

    /// Client for `POST {model, input: [...]}` → `{data: [{embedding}]}`.
    #[derive(Debug, Clone)]
    pub struct HttpEmbedder {
        pub cfg: EmbedConfig,
        pub retry: RetryPolicy,
        pub token: Option<String>,
    }

    impl HttpEmbedder {
        pub fn new(cfg: EmbedConfig) -> Self {
            Self {
                cfg,
                retry: RetryPolicy::default(),
                token: token_from_env(),
            }
        }

        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
            let url = self.cfg.endpoint.as_deref().unwrap_or_default();
            let body = json!({ "model": self.cfg.model, "input": texts });
            let resp = post_json(url, self.token.as_deref(), &body, &self.retry)
                .map_err(|e| EmbedError::RemoteError(e.to_string()))?;
            let data = resp["data"]
                .as_array()
                .ok_or_else(|| EmbedError::RemoteError("response has no data array".into()))?;
            if data.len() != texts.len() {
                return Err(EmbedError::RemoteError(format!(
                    "expected {} embeddings, got {}",
                    texts.len(),
                    data.len()
                )));
            }
            let mut out: Vec<(usize, Embedding)> = Vec::with_capacity(data.len());
            for (pos, item) in data.iter().enumerate() {
                let index = item["index"].as_u64().map(|i| i as usize).unwrap_or(pos);
                let values: Vec<f64> = item["embedding"]
                    .as_array()
                    .ok_or_else(|| EmbedError::RemoteError("item without embedding".into()))?
                    .iter()
                    .map(Value::as_f64)
                    .collect::<Option<_>>()
                    .ok_or_else(|| EmbedError::RemoteError("non-numeric embedding entry".into()))?;
                if values.len() != self.cfg.dimension {
                    return Err(EmbedError::DimensionMismatch(values.len(), self.cfg.dimension));
                }
                out.push((index, Embedding::new(values)?));
            }
            out.sort_by_key(|(i, _)| *i);
            Ok(out.into_iter().map(|(_, e)| e).collect())
        }
    }

    impl Embedder for HttpEmbedder {
        fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
            if texts.iter().any(|t| t.trim().is_empty()) {
                return Err(EmbedError::EmptyText);
            }
            let batches: Vec<&[&str]> = texts.chunks(self.cfg.batch_size.max(1)).collect();
            let mut results = Vec::with_capacity(batches.len());
            for wave in batches.chunks(self.cfg.concurrency.max(1)) {
                let wave_results: Vec<_> = std::thread::scope(|s| {
                    let handles: Vec<_> = wave.iter().map(|b| s.spawn(|| self.embed_batch(b))).collect();
                    handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
                });
                results.extend(wave_results);
            }
            let mut out = Vec::with_capacity(texts.len());
            for r in results {
                out.extend(r?);
            }
            Ok(out)
        }
    }
}

/// Builds the configured provider.
pub fn embedder(cfg: &EmbedConfig) -> Result<Box<dyn Embedder>, EmbedError> {
    cfg.validate()?;
    match cfg.provider {
        EmbedProvider::Hashed => Ok(Box::new(HashedNgramEmbedder { cfg: cfg.clone() })),
        #[cfg(feature = "http")]
        EmbedProvider::Http => Ok(Box::new(HttpEmbedder::new(cfg.clone()))),
        #[cfg(not(feature = "http"))]
        EmbedProvider::Http => Err(EmbedError::InvalidConfig("built without http support".into())),
    }
}

pub fn embed_text(text: &str, cfg: &EmbedConfig) -> Result<Embedding, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let mut v = embedder(cfg)?.embed(&[text])?;
    Ok(v.remove(0))
}

/// ‖a − b‖₂.
pub fn pairwise_distance(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dimension() != b.dimension() {
        return Err(EmbedError::DimensionMismatch(a.dimension(), b.dimension()));
    }
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Symmetric matrix of pairwise distances with a zero diagonal.
pub fn distance_matrix(embeddings: &[Embedding]) -> Result<Vec<Vec<f64>>, EmbedError> {
    let n = embeddings.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = pairwise_distance(&embeddings[i], &embeddings[j])?;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}
