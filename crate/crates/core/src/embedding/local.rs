use sha2::{Digest, Sha256};

use super::{EmbeddingError, EmbeddingProvider, EmbeddingVector, EMBEDDING_DIM};

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer applied to `key + (counter + 1)·γ`: a counter-based
/// generator, so element `i` depends only on the key and `i`.
fn splitmix64(key: u64, counter: u64) -> u64 {
    let mut z = key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Offline, deterministic embeddings.
///
/// The text and seed are hashed (SHA-256, first 8 bytes little-endian) into a
/// 64-bit key; SplitMix64 expands it to 1536 uniforms in `[-1, 1)`, which are
/// scaled to unit length in `f64` and rounded once to `f32`. Only integer
/// arithmetic, one square root and IEEE division are involved, so results are
/// identical across processes and platforms.
#[derive(Clone, Debug)]
pub struct LocalProvider {
    seed: u64,
}

impl LocalProvider {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn key(&self, text: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

impl EmbeddingProvider for LocalProvider {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let key = self.key(text);
        let raw: Vec<f64> = (0..EMBEDDING_DIM as u64)
            .map(|i| {
                let unit = (splitmix64(key, i) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                2.0 * unit - 1.0
            })
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let values = raw.iter().map(|v| (v / norm) as f32).collect();
        Ok(EmbeddingVector::new(values).expect("finite, correct width"))
    }

    fn identity(&self) -> String {
        format!("local-{}", self.seed)
    }
}
