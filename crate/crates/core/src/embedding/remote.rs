use std::env;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{
    EmbeddingError, EmbeddingProvider, EmbeddingVector, TextHash, API_KEY_ENV, MAX_IN_FLIGHT_ENV, MODEL_ENV, URL_ENV,
};

pub const DEFAULT_URL: &str = "https://api.openai.com/v1/embeddings";
pub const DEFAULT_MODEL: &str = "text-embedding-ada-002";

#[derive(Clone, Debug)]
pub struct RemoteConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub base_backoff: Duration,
    pub timeout: Duration,
    /// Texts per request.
    pub batch_size: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: DEFAULT_URL.into(),
            api_key: None,
            model: DEFAULT_MODEL.into(),
            max_in_flight: 4,
            max_attempts: 5,
            base_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
            batch_size: 64,
        }
    }
}

impl RemoteConfig {
    pub fn from_env() -> Result<Self, EmbeddingError> {
        let mut cfg = Self::default();
        if let Ok(url) = env::var(URL_ENV) {
            cfg.url = url;
        }
        if let Ok(model) = env::var(MODEL_ENV) {
            cfg.model = model;
        }
        cfg.api_key = env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        if let Ok(n) = env::var(MAX_IN_FLIGHT_ENV) {
            cfg.max_in_flight = n
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| EmbeddingError::Config(format!("{MAX_IN_FLIGHT_ENV} must be a positive integer")))?;
        }
        Ok(cfg)
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Deserialize)]
struct Response {
    data: Vec<Datum>,
}

#[derive(Deserialize)]
struct Datum {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

enum Attempt {
    Retry(String),
    Fatal(EmbeddingError),
}

/// Client for an OpenAI-compatible embeddings endpoint.
///
/// Transient failures (connection errors, 429, 5xx) are retried with
/// exponential backoff; 401/403 fail immediately. At most `max_in_flight`
/// requests are outstanding at once across all threads.
pub struct RemoteProvider {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    gate: Semaphore,
}

impl RemoteProvider {
    pub fn new(config: RemoteConfig) -> Result<Self, EmbeddingError> {
        if config.max_attempts == 0 || config.batch_size == 0 {
            return Err(EmbeddingError::Config("max_attempts and batch_size must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| EmbeddingError::Config(format!("http client: {e}")))?;
        let gate = Semaphore::new(config.max_in_flight);
        Ok(Self { config, client, gate })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let hash = TextHash::of(texts[0]);
        let mut last = String::new();
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                thread::sleep(self.config.base_backoff * 2u32.saturating_pow(attempt - 1));
            }
            let outcome = {
                let _permit = self.gate.acquire();
                self.try_once(texts, hash)
            };
            match outcome {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(detail)) => last = detail,
            }
        }
        Err(EmbeddingError::RemoteUnavailable { hash, attempts: self.config.max_attempts, detail: last })
    }

    fn try_once(&self, texts: &[&str], hash: TextHash) -> Result<Vec<EmbeddingVector>, Attempt> {
        let mut req = self.client.post(&self.config.url).json(&json!({ "model": self.config.model, "input": texts }));
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(format!("transport error: {}", e.without_url())))?;
        let status = resp.status();
        if status == 401 || status == 403 {
            return Err(Attempt::Fatal(EmbeddingError::AuthFailure { hash }));
        }
        if status == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        let bad = |detail: String| Attempt::Fatal(EmbeddingError::BadResponse { hash, detail });
        if !status.is_success() {
            return Err(bad(format!("HTTP {status}")));
        }
        let body: Response = resp.json().map_err(|e| bad(format!("malformed body: {}", e.without_url())))?;
        if body.data.len() != texts.len() {
            return Err(bad(format!("{} embeddings for {} inputs", body.data.len(), texts.len())));
        }
        let mut out: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        for (pos, d) in body.data.into_iter().enumerate() {
            let i = d.index.unwrap_or(pos);
            let slot = out.get_mut(i).ok_or_else(|| bad(format!("index {i} out of range")))?;
            *slot = Some(EmbeddingVector::new(d.embedding).map_err(bad)?);
        }
        out.into_iter().map(|v| v.ok_or_else(|| bad("missing index".into()))).collect()
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(self.request(&[text])?.remove(0))
    }

    fn embed_unique(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let chunks: Vec<&[&str]> = texts.chunks(self.config.batch_size).collect();
        let results: Vec<Result<Vec<EmbeddingVector>, EmbeddingError>> = thread::scope(|s| {
            let handles: Vec<_> = chunks.iter().map(|c| s.spawn(|| self.request(c))).collect();
            handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(texts.len());
        for (ci, r) in results.into_iter().enumerate() {
            match r {
                Ok(v) => out.extend(v),
                Err(e) => {
                    return Err(EmbeddingError::Batch { index: ci * self.config.batch_size, source: Box::new(e) })
                }
            }
        }
        Ok(out)
    }

    fn identity(&self) -> String {
        format!("remote-{}", self.config.model)
    }
}
