use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::{dedup, remap_batch_index, EmbeddingError, EmbeddingProvider, EmbeddingVector, TextHash, EMBEDDING_DIM};

const RECORD_LEN: usize = 32 + EMBEDDING_DIM * 4;

/// Content-addressed embedding store.
///
/// The backing file is an append-only sequence of records, each a 32-byte
/// SHA-256 of the input text followed by 1536 little-endian `f32`s. A torn
/// final record (interrupted write) is dropped on open.
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<TextHash, Arc<EmbeddingVector>>>,
    file: Mutex<Option<File>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self { path: None, entries: Mutex::new(HashMap::new()), file: Mutex::new(None) }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| EmbeddingError::Cache { path: path.display().to_string(), source };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path).map_err(io_err)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err)?;
        let whole = bytes.len() / RECORD_LEN * RECORD_LEN;
        if whole != bytes.len() {
            file.set_len(whole as u64).map_err(io_err)?;
        }
        let mut entries = HashMap::new();
        for rec in bytes[..whole].chunks_exact(RECORD_LEN) {
            let hash = TextHash(rec[..32].try_into().expect("32 bytes"));
            let values: Vec<f32> =
                rec[32..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if let Ok(v) = EmbeddingVector::new(values) {
                entries.insert(hash, Arc::new(v));
            }
        }
        Ok(Self { path: Some(path), entries: Mutex::new(entries), file: Mutex::new(Some(file)) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, hash: &TextHash) -> Option<Arc<EmbeddingVector>> {
        self.entries.lock().expect("cache lock").get(hash).cloned()
    }

    /// Stores a vector; the first value stored for a hash wins.
    pub fn insert(&self, hash: TextHash, vector: EmbeddingVector) -> Result<Arc<EmbeddingVector>, EmbeddingError> {
        let mut entries = self.entries.lock().expect("cache lock");
        if let Some(existing) = entries.get(&hash) {
            return Ok(Arc::clone(existing));
        }
        if let Some(file) = self.file.lock().expect("cache file lock").as_mut() {
            let mut rec = Vec::with_capacity(RECORD_LEN);
            rec.extend_from_slice(&hash.0);
            for v in vector.values() {
                rec.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&rec).map_err(|source| EmbeddingError::Cache {
                path: self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                source,
            })?;
        }
        let shared = Arc::new(vector);
        entries.insert(hash, Arc::clone(&shared));
        Ok(shared)
    }
}

/// Provider wrapper that consults an [`EmbeddingCache`] before delegating.
pub struct CachedProvider<P> {
    inner: P,
    cache: EmbeddingCache,
}

impl<P: EmbeddingProvider> CachedProvider<P> {
    pub fn new(inner: P, cache: EmbeddingCache) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedProvider<P> {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let hash = TextHash::of(text);
        if let Some(hit) = self.cache.get(&hash) {
            return Ok((*hit).clone());
        }
        let v = self.inner.embed_text(text)?;
        Ok((*self.cache.insert(hash, v)?).clone())
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let (unique, slots) = dedup(texts);
        let hashes: Vec<TextHash> = unique.iter().map(|t| TextHash::of(t)).collect();
        let mut resolved: Vec<Option<Arc<EmbeddingVector>>> = hashes.iter().map(|h| self.cache.get(h)).collect();
        let missing: Vec<usize> = (0..unique.len()).filter(|&i| resolved[i].is_none()).collect();
        if !missing.is_empty() {
            let texts_missing: Vec<&str> = missing.iter().map(|&i| unique[i]).collect();
            let fresh = self.inner.embed_unique(&texts_missing).map_err(|e| remap_batch_index(e, &texts_missing, texts))?;
            for (&i, v) in missing.iter().zip(fresh) {
                resolved[i] = Some(self.cache.insert(hashes[i], v)?);
            }
        }
        Ok(slots.into_iter().map(|s| (*resolved[s].clone().expect("filled")).clone()).collect())
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::LocalProvider;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        inner: LocalProvider,
        calls: AtomicUsize,
    }

    impl EmbeddingProvider for Counting {
        fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.embed_text(text)
        }

        fn identity(&self) -> String {
            "counting".into()
        }
    }

    fn counting() -> Counting {
        Counting { inner: LocalProvider::new(1), calls: AtomicUsize::new(0) }
    }

    #[test]
    fn same_text_twice_is_one_call() {
        let p = CachedProvider::new(counting(), EmbeddingCache::in_memory());
        let a = p.embed_text("x").unwrap();
        let b = p.embed_text("x").unwrap();
        assert_eq!(a, b);
        assert_eq!(p.inner().calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn batch_dedup_and_order() {
        let p = CachedProvider::new(counting(), EmbeddingCache::in_memory());
        let out = p.embed_batch(&["a", "b", "a"]).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0], out[2]);
        assert_ne!(out[0], out[1]);
        assert!(p.embed_batch(&[]).unwrap().is_empty());

        let texts: Vec<String> = (0..100).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let before = p.inner().calls.load(Ordering::SeqCst);
        p.embed_batch(&refs).unwrap();
        assert!(p.inner().calls.load(Ordering::SeqCst) - before <= 100);
    }

    #[test]
    fn persists_across_reopen_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        let cold = {
            let p = CachedProvider::new(counting(), EmbeddingCache::open(&path).unwrap());
            p.embed_batch(&["PUSH1 ADD", "STOP"]).unwrap()
        };
        let p = CachedProvider::new(counting(), EmbeddingCache::open(&path).unwrap());
        assert_eq!(p.cache().len(), 2);
        let warm = p.embed_batch(&["PUSH1 ADD", "STOP"]).unwrap();
        assert_eq!(p.inner().calls.load(Ordering::SeqCst), 0);
        for (c, w) in cold.iter().zip(&warm) {
            let cb: Vec<u32> = c.values().iter().map(|v| v.to_bits()).collect();
            let wb: Vec<u32> = w.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(cb, wb);
        }
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        {
            let c = EmbeddingCache::open(&path).unwrap();
            c.insert(TextHash::of("a"), LocalProvider::new(0).embed_text("a").unwrap()).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[1, 2, 3]).unwrap();
        drop(f);
        let c = EmbeddingCache::open(&path).unwrap();
        assert_eq!(c.len(), 1);
        c.insert(TextHash::of("b"), LocalProvider::new(0).embed_text("b").unwrap()).unwrap();
        drop(c);
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, 2 * RECORD_LEN);
        assert_eq!(EmbeddingCache::open(&path).unwrap().len(), 2);
    }
}
