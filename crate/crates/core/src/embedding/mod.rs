//! 1536-dimensional text embeddings for CFG nodes.
//!
//! [`LocalProvider`] is a deterministic offline stand-in; [`RemoteProvider`]
//! talks to an OpenAI-compatible `/embeddings` endpoint. Either can be wrapped
//! in [`CachedProvider`] for a persistent content-addressed cache.

mod cache;
mod local;
mod remote;

use std::collections::HashMap;
use std::env;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

pub use cache::{CachedProvider, EmbeddingCache};
pub use local::LocalProvider;
pub use remote::{RemoteConfig, RemoteProvider};

pub const EMBEDDING_DIM: usize = 1536;

pub const PROVIDER_ENV: &str = "SCVD_EMBEDDING_PROVIDER";
pub const URL_ENV: &str = "SCVD_EMBEDDING_URL";
pub const API_KEY_ENV: &str = "SCVD_EMBEDDING_API_KEY";
pub const MODEL_ENV: &str = "SCVD_EMBEDDING_MODEL";
pub const SEED_ENV: &str = "SCVD_EMBEDDING_SEED";
pub const MAX_IN_FLIGHT_ENV: &str = "SCVD_EMBEDDING_MAX_IN_FLIGHT";

/// SHA-256 of an input text; identifies it in caches and error messages.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TextHash(pub [u8; 32]);

impl TextHash {
    pub fn of(text: &str) -> Self {
        Self(Sha256::digest(text.as_bytes()).into())
    }
}

impl fmt::Display for TextHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(&self.0[..8]))
    }
}

impl fmt::Debug for TextHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TextHash({self})")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embedding service rejected the credential (text {hash})")]
    AuthFailure { hash: TextHash },
    #[error("embedding service unavailable after {attempts} attempt(s) (text {hash}): {detail}")]
    RemoteUnavailable { hash: TextHash, attempts: u32, detail: String },
    #[error("unexpected embedding response (text {hash}): {detail}")]
    BadResponse { hash: TextHash, detail: String },
    #[error("embedding provider misconfigured: {0}")]
    Config(String),
    #[error("embedding cache {path}: {source}")]
    Cache { path: String, source: std::io::Error },
    #[error("batch item {index}: {source}")]
    Batch { index: usize, source: Box<EmbeddingError> },
}

/// Finite vector of exactly [`EMBEDDING_DIM`] values.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, String> {
        if values.len() != EMBEDDING_DIM {
            return Err(format!("expected {EMBEDDING_DIM} values, got {}", values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(format!("non-finite value at index {i}"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// Source of text embeddings. Implementations must tolerate concurrent calls.
pub trait EmbeddingProvider: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;

    /// Embeds distinct texts; called by [`EmbeddingProvider::embed_batch`]
    /// after deduplication. Providers with a native batch API override this.
    fn embed_unique(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| self.embed_text(t).map_err(|e| EmbeddingError::Batch { index, source: Box::new(e) }))
            .collect()
    }

    /// Order-preserving; identical texts are embedded once.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let (unique, slots) = dedup(texts);
        let vectors = self.embed_unique(&unique).map_err(|e| remap_batch_index(e, &unique, texts))?;
        Ok(slots.into_iter().map(|s| vectors[s].clone()).collect())
    }

    /// Stable description of the provider configuration (used to name caches).
    fn identity(&self) -> String;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<P> {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        (**self).embed_text(text)
    }

    fn embed_unique(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        (**self).embed_unique(texts)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        (**self).embed_batch(texts)
    }

    fn identity(&self) -> String {
        (**self).identity()
    }
}

/// Distinct texts in first-seen order, and for each input its index among them.
pub(crate) fn dedup<'a>(texts: &[&'a str]) -> (Vec<&'a str>, Vec<usize>) {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut unique = Vec::new();
    let slots = texts
        .iter()
        .map(|&t| {
            *seen.entry(t).or_insert_with(|| {
                unique.push(t);
                unique.len() - 1
            })
        })
        .collect();
    (unique, slots)
}

/// Rewrites a batch index over the deduplicated list to the first matching
/// position in the caller's list.
pub(crate) fn remap_batch_index(err: EmbeddingError, unique: &[&str], texts: &[&str]) -> EmbeddingError {
    match err {
        EmbeddingError::Batch { index, source } => {
            let original = unique.get(index).and_then(|u| texts.iter().position(|t| t == u)).unwrap_or(index);
            EmbeddingError::Batch { index: original, source }
        }
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Local,
    Remote,
}

impl std::str::FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "local" => Ok(ProviderKind::Local),
            "remote" => Ok(ProviderKind::Remote),
            other => Err(format!("unknown embedding provider {other:?} (expected local or remote)")),
        }
    }
}

/// Builds a provider from the `SCVD_EMBEDDING_*` variables, optionally
/// overriding the kind. With `cache_dir`, the provider is wrapped in a
/// persistent cache file named after its identity.
pub fn provider_from_env(
    kind: Option<ProviderKind>,
    cache_dir: Option<&Path>,
) -> Result<Arc<dyn EmbeddingProvider>, EmbeddingError> {
    let kind = match kind {
        Some(k) => k,
        None => match env::var(PROVIDER_ENV) {
            Ok(v) => v.parse().map_err(EmbeddingError::Config)?,
            Err(_) => ProviderKind::Local,
        },
    };
    let inner: Arc<dyn EmbeddingProvider> = match kind {
        ProviderKind::Local => {
            let seed = match env::var(SEED_ENV) {
                Ok(s) => s.parse().map_err(|_| EmbeddingError::Config(format!("{SEED_ENV} must be an integer")))?,
                Err(_) => 0,
            };
            Arc::new(LocalProvider::new(seed))
        }
        ProviderKind::Remote => Arc::new(RemoteProvider::new(RemoteConfig::from_env()?)?),
    };
    match cache_dir {
        None => Ok(inner),
        Some(dir) => {
            let name = format!("embeddings-{}.bin", sanitize(&inner.identity()));
            let cache = EmbeddingCache::open(dir.join(name))?;
            Ok(Arc::new(CachedProvider::new(inner, cache)))
        }
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_invariants() {
        assert!(EmbeddingVector::new(vec![0.0; 10]).is_err());
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[3] = f32::NAN;
        assert!(EmbeddingVector::new(v).is_err());
        assert!(EmbeddingVector::new(vec![0.5; EMBEDDING_DIM]).is_ok());
    }

    #[test]
    fn dedup_slots() {
        let (u, s) = dedup(&["a", "b", "a", "c", "b"]);
        assert_eq!(u, vec!["a", "b", "c"]);
        assert_eq!(s, vec![0, 1, 0, 2, 1]);
    }

    #[test]
    fn provider_kind_parsing() {
        assert_eq!("Remote".parse::<ProviderKind>().unwrap(), ProviderKind::Remote);
        assert!("gpu".parse::<ProviderKind>().is_err());
    }
}
