//! Text-completion gateway: backend registry, response cache, retries with
//! exponential backoff and a token-bucket rate limiter.

mod cache;
mod http;
mod limiter;
pub(crate) mod mock;

pub use cache::{CacheEntry, ResponseCache};
pub use http::{HttpBackend, HttpFlavor, HttpSettings, ENV_LLM_KEY, ENV_LLM_URL};
pub use limiter::{RetryPolicy, TokenBucket};
pub use mock::{mock_complete, MockBackend, NER_SENTINEL, REFINE_SENTINEL, SUMMARIZE_SENTINEL};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    /// Instructions sent as a system message to chat backends.
    #[serde(default)]
    pub system: Option<String>,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub backend_id: String,
    /// Reproducible requests must decode greedily.
    #[serde(default)]
    pub reproducible: bool,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, backend_id: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            system: None,
            max_output_tokens: 512,
            temperature: 0.0,
            backend_id: backend_id.into(),
            reproducible: true,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system = Some(system.into());
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        if self.prompt.trim().is_empty() {
            return bad("empty prompt");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature outside [0, 2]");
        }
        if self.reproducible && self.temperature != 0.0 {
            return bad("reproducible requests require temperature 0");
        }
        Ok(())
    }

    /// Content hash over prompt, decoding parameters and backend id. The
    /// `reproducible` marker does not change the backend call and is excluded.
    pub fn cache_key(&self) -> String {
        #[derive(Serialize)]
        struct KeyMaterial<'a> {
            prompt: &'a str,
            system: Option<&'a str>,
            max_output_tokens: u32,
            temperature_bits: u64,
            backend_id: &'a str,
        }
        let material = KeyMaterial {
            prompt: &self.prompt,
            system: self.system.as_deref(),
            max_output_tokens: self.max_output_tokens,
            temperature_bits: self.temperature.to_bits(),
            backend_id: &self.backend_id,
        };
        fsutil::sha256_hex(&serde_json::to_vec(&material).expect("key material serializes"))
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend `{backend}` unavailable after {attempts} attempts: {last}")]
    BackendUnavailable { backend: String, attempts: u32, last: String },
    #[error("authentication failed: {0}")]
    AuthError(String),
    #[error("backend returned an empty response")]
    ResponseEmpty,
    #[error("no backend registered under `{0}`")]
    UnknownBackend(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("prompt does not start with a known task sentinel: `{0}`")]
    UnknownSentinel(String),
    /// Retryable failure; never surfaces from [`Gateway::complete`].
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("cache i/o: {0}")]
    Cache(#[from] std::io::Error),
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError>;
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Dispatches requests to registered backends. Safe to share across threads.
pub struct Gateway {
    backends: HashMap<String, Arc<dyn Backend>>,
    cache: ResponseCache,
    retry: RetryPolicy,
    limiter: Option<TokenBucket>,
    sleeper: Sleeper,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl Gateway {
    pub fn new(cache: ResponseCache) -> Self {
        Self {
            backends: HashMap::new(),
            cache,
            retry: RetryPolicy::default(),
            limiter: None,
            sleeper: Arc::new(std::thread::sleep),
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    /// In-memory cache with the mock backend registered as `mock`.
    pub fn with_mock() -> Self {
        Self::new(ResponseCache::in_memory()).register("mock", MockBackend::default())
    }

    pub fn register(mut self, id: impl Into<String>, backend: impl Backend + 'static) -> Self {
        self.backends.insert(id.into(), Arc::new(backend));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, limiter: TokenBucket) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    /// Number of requests that reached a backend (retries included).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::SeqCst)
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let backend = self
            .backends
            .get(&req.backend_id)
            .ok_or_else(|| GatewayError::UnknownBackend(req.backend_id.clone()))?;
        let key = req.cache_key();
        if let Some(hit) = self.cache.get(&key) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit.response);
        }

        let mut attempt = 0u32;
        let response = loop {
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match backend.complete(req) {
                Ok(r) => break r,
                Err(GatewayError::Transient(msg)) => {
                    if attempt >= self.retry.max_retries {
                        return Err(GatewayError::BackendUnavailable {
                            backend: req.backend_id.clone(),
                            attempts: attempt + 1,
                            last: msg,
                        });
                    }
                    let delay = self.retry.delay(attempt);
                    log::warn!("backend `{}` failed ({msg}); retrying in {delay:?}", req.backend_id);
                    (self.sleeper)(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        self.cache.put(&CacheEntry::new(key, response.clone()))?;
        Ok(response)
    }
}
