//! Uniform access to verifier models: remote chat-completions endpoints and
//! scripted fixtures behind one trait, with bounded retries, per-endpoint
//! concurrency limits, and a disk completion cache.

mod backend;
mod cache;

pub use backend::{
    prompt_key, Backend, BackendResponse, FixtureEntry, RecordingBackend, RemoteBackend,
    ScriptedBackend,
};
pub use cache::{CompletionCache, IndexEntry};

use std::fmt;
use std::io;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::StageId;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("[{model_id}] transport failure: {message}")]
    Transport { model_id: String, message: String },
    #[error("[{model_id}] api returned status {status}: {body}")]
    Api {
        model_id: String,
        status: u16,
        body: String,
    },
    #[error("[{model_id}] request timed out")]
    Timeout { model_id: String },
    #[error("[{model_id}] no fixture entry for key {key}")]
    FixtureMiss { model_id: String, key: String },
    #[error("[{model_id}] malformed response: {detail}")]
    MalformedResponse { model_id: String, detail: String },
    #[error("{path}:{line}: {message}")]
    FixtureFile {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("[{model_id}] invalid request: {message}")]
    InvalidRequest { model_id: String, message: String },
    #[error("endpoint {model_id:?} misconfigured: {message}")]
    InvalidEndpoint { model_id: String, message: String },
}

impl GatewayError {
    /// Only transient conditions are worth another attempt: transport
    /// failures, timeouts, and HTTP 429/5xx.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport { .. } | GatewayError::Timeout { .. } => true,
            GatewayError::Api { status, .. } => {
                *status == 429 || (500..600).contains(status)
            }
            _ => false,
        }
    }

    /// The endpoint the failure belongs to, when it has one.
    pub fn model_id(&self) -> Option<&str> {
        match self {
            GatewayError::Transport { model_id, .. }
            | GatewayError::Api { model_id, .. }
            | GatewayError::Timeout { model_id }
            | GatewayError::FixtureMiss { model_id, .. }
            | GatewayError::MalformedResponse { model_id, .. }
            | GatewayError::InvalidRequest { model_id, .. }
            | GatewayError::InvalidEndpoint { model_id, .. } => Some(model_id),
            _ => None,
        }
    }
}

/// What a completion is for; keys fixtures and cache entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CallKind {
    Stage(StageId),
    Decompose,
    Judge,
}

impl CallKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CallKind::Stage(s) => s.as_str(),
            CallKind::Decompose => "decompose",
            CallKind::Judge => "judge",
        }
    }
}

impl fmt::Display for CallKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Sampling parameters sent with every request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.8,
            top_k: Some(20),
            max_tokens: 16384,
        }
    }
}

/// Completion budget for math-specialized models, which loop without a
/// tighter cap.
pub const MATH_SPECIALIZED_MAX_TOKENS: u32 = 4096;

impl GenerationParams {
    pub fn validate(&self) -> Result<(), String> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(format!("temperature must be ≥ 0, got {}", self.temperature));
        }
        if !self.top_p.is_finite() || self.top_p <= 0.0 || self.top_p > 1.0 {
            return Err(format!("top_p must be in (0,1], got {}", self.top_p));
        }
        if self.top_k == Some(0) {
            return Err("top_k must be positive when set".to_string());
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".to_string());
        }
        Ok(())
    }
}

/// Where an endpoint's completions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BackendConfig {
    Remote { base_url: String },
    Scripted { fixture_path: PathBuf },
}

/// Default environment variable holding the bearer token.
pub const DEFAULT_AUTH_ENV: &str = "MATHQ_API_KEY";

/// One verifier model and how to reach it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub model_id: String,
    pub backend: BackendConfig,
    pub gen_params: GenerationParams,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Environment variable consulted for the bearer token.
    pub auth_env: String,
    /// Upper bound on simultaneous requests to this endpoint.
    pub max_in_flight: Option<usize>,
    /// First backoff delay; doubles per retry. Test endpoints set ~1ms.
    pub retry_initial_delay_ms: u64,
}

impl ModelEndpoint {
    pub fn remote(model_id: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            backend: BackendConfig::Remote {
                base_url: base_url.into(),
            },
            gen_params: GenerationParams::default(),
            timeout: Duration::from_secs(120),
            max_retries: 2,
            auth_env: DEFAULT_AUTH_ENV.to_string(),
            max_in_flight: None,
            retry_initial_delay_ms: 500,
        }
    }

    pub fn scripted(model_id: impl Into<String>, fixture_path: impl Into<PathBuf>) -> Self {
        Self {
            model_id: model_id.into(),
            backend: BackendConfig::Scripted {
                fixture_path: fixture_path.into(),
            },
            gen_params: GenerationParams::default(),
            timeout: Duration::from_secs(120),
            max_retries: 0,
            auth_env: DEFAULT_AUTH_ENV.to_string(),
            max_in_flight: None,
            retry_initial_delay_ms: 1,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |message: String| GatewayError::InvalidEndpoint {
            model_id: self.model_id.clone(),
            message,
        };
        if self.model_id.is_empty() {
            return Err(invalid("model_id must be non-empty".to_string()));
        }
        self.gen_params.validate().map_err(invalid)?;
        if self.max_in_flight == Some(0) {
            return Err(invalid("max_in_flight must be positive when set".to_string()));
        }
        Ok(())
    }
}

/// Token accounting as reported by the server, passed through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    #[serde(default)]
    pub prompt_tokens: Option<u64>,
    #[serde(default)]
    pub completion_tokens: Option<u64>,
    #[serde(default)]
    pub total_tokens: Option<u64>,
}

/// One completed request. `from_cache` is runtime provenance, deliberately
/// not serialized: trace files must be identical between cold and warm runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub model_id: String,
    pub usage: Option<TokenUsage>,
    pub from_cache: bool,
}

/// One request as a backend sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub model_id: String,
    pub kind: CallKind,
    pub system: String,
    pub user: String,
    pub params: GenerationParams,
}

fn hash_field(hasher: &mut Sha256, bytes: &[u8]) {
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(bytes);
}

/// Stable digest identifying a request: model, call kind, both prompt
/// parts, and every sampling parameter, all length-prefixed so field
/// boundaries cannot alias.
pub fn cache_key(
    model_id: &str,
    kind: CallKind,
    system: &str,
    user: &str,
    params: &GenerationParams,
) -> String {
    let mut hasher = Sha256::new();
    hash_field(&mut hasher, model_id.as_bytes());
    hash_field(&mut hasher, kind.as_str().as_bytes());
    hash_field(&mut hasher, system.as_bytes());
    hash_field(&mut hasher, user.as_bytes());
    hash_field(&mut hasher, &params.temperature.to_bits().to_le_bytes());
    hash_field(&mut hasher, &params.top_p.to_bits().to_le_bytes());
    match params.top_k {
        Some(k) => hash_field(&mut hasher, &k.to_le_bytes()),
        None => hash_field(&mut hasher, b"unset"),
    }
    hash_field(&mut hasher, &params.max_tokens.to_le_bytes());
    hex::encode(hasher.finalize())
}

/// Counting semaphore bounding in-flight requests per endpoint.
struct Gate {
    limit: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
}

struct GateGuard<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            limit,
            in_flight: Mutex::new(0),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.in_flight.lock().expect("gate mutex poisoned");
        while *n >= self.limit {
            n = self.released.wait(n).expect("gate mutex poisoned");
        }
        *n += 1;
        GateGuard(self)
    }
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("gate mutex poisoned");
        *n -= 1;
        self.0.released.notify_one();
    }
}

/// A configured endpoint bound to its backend, cache, and retry policy.
/// Cheap to share across worker threads.
pub struct ModelClient {
    endpoint: ModelEndpoint,
    backend: Arc<dyn Backend>,
    cache: Option<Arc<CompletionCache>>,
    gate: Option<Gate>,
}

impl ModelClient {
    /// Resolve the endpoint's backend config and wire up the cache.
    pub fn new(
        endpoint: ModelEndpoint,
        cache: Option<Arc<CompletionCache>>,
    ) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let backend: Arc<dyn Backend> = match &endpoint.backend {
            BackendConfig::Remote { base_url } => Arc::new(RemoteBackend::new(
                base_url.clone(),
                endpoint.timeout,
                endpoint.auth_env.clone(),
            )?),
            BackendConfig::Scripted { fixture_path } => {
                Arc::new(ScriptedBackend::load(fixture_path)?)
            }
        };
        Ok(Self::assemble(endpoint, backend, cache))
    }

    /// Bind an endpoint to an externally built backend (recorders, oracles,
    /// in-memory fixtures).
    pub fn with_backend(
        endpoint: ModelEndpoint,
        backend: Arc<dyn Backend>,
        cache: Option<Arc<CompletionCache>>,
    ) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        Ok(Self::assemble(endpoint, backend, cache))
    }

    fn assemble(
        endpoint: ModelEndpoint,
        backend: Arc<dyn Backend>,
        cache: Option<Arc<CompletionCache>>,
    ) -> Self {
        let gate = endpoint.max_in_flight.map(Gate::new);
        Self {
            endpoint,
            backend,
            cache,
            gate,
        }
    }

    pub fn model_id(&self) -> &str {
        &self.endpoint.model_id
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    /// Issue one completion: cache first, then the backend with at most
    /// `1 + max_retries` attempts, backing off exponentially with jitter on
    /// transient failures.
    pub fn complete(
        &self,
        kind: CallKind,
        system: &str,
        user: &str,
    ) -> Result<Completion, GatewayError> {
        if user.trim().is_empty() {
            return Err(GatewayError::InvalidRequest {
                model_id: self.endpoint.model_id.clone(),
                message: "user prompt must be non-empty".to_string(),
            });
        }
        let key = cache_key(
            &self.endpoint.model_id,
            kind,
            system,
            user,
            &self.endpoint.gen_params,
        );
        if let Some(cache) = &self.cache {
            if let Some(text) = cache.get(&self.endpoint.model_id, &key) {
                return Ok(Completion {
                    text,
                    model_id: self.endpoint.model_id.clone(),
                    usage: None,
                    from_cache: true,
                });
            }
        }
        let request = CompletionRequest {
            model_id: self.endpoint.model_id.clone(),
            kind,
            system: system.to_string(),
            user: user.to_string(),
            params: self.endpoint.gen_params,
        };
        let _slot = self.gate.as_ref().map(Gate::acquire);
        let attempts = 1 + self.endpoint.max_retries;
        let mut outcome = Err(GatewayError::InvalidRequest {
            model_id: self.endpoint.model_id.clone(),
            message: "no attempt made".to_string(),
        });
        for attempt in 0..attempts {
            outcome = self.backend.complete(&request);
            match &outcome {
                Ok(_) => break,
                Err(e) if e.is_retryable() && attempt + 1 < attempts => {
                    let base = self
                        .endpoint
                        .retry_initial_delay_ms
                        .saturating_mul(1 << attempt.min(16));
                    let jitter = if base > 1 {
                        rand::thread_rng().gen_range(0..=base / 2)
                    } else {
                        0
                    };
                    let delay = (base + jitter).min(30_000);
                    log::debug!(
                        "[{}] attempt {}/{} failed ({}); retrying in {}ms",
                        self.endpoint.model_id,
                        attempt + 1,
                        attempts,
                        outcome.as_ref().err().map(|e| e.to_string()).unwrap_or_default(),
                        delay
                    );
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(_) => break,
            }
        }
        let response = outcome?;
        if let Some(cache) = &self.cache {
            cache.put(&self.endpoint.model_id, &key, kind.as_str(), &response.text)?;
        }
        Ok(Completion {
            text: response.text,
            model_id: self.endpoint.model_id.clone(),
            usage: response.usage,
            from_cache: false,
        })
    }
}
