//! Chat-completion backends: an OpenAI-compatible HTTP transport and an
//! offline replay stub, wrapped in deterministic retry and concurrency
//! limiting.
//!
//! The `Backend` wrapper owns the policy; transports only perform single
//! attempts. Replay responses are keyed by a fingerprint of the final user
//! message, which by construction contains exactly the chunk text.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::prompt::{Message, Role};

/// One request to a chat backend.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub schema: Option<Value>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        ChatRequest {
            messages,
            schema: None,
            temperature: 0.0,
        }
    }
}

/// A successful completion plus bookkeeping about how it was obtained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResult {
    pub content: String,
    /// Attempts consumed, including the successful one.
    pub attempts: u32,
    /// True when the provider rejected the schema and the request was
    /// retried without it.
    pub schema_dropped: bool,
}

/// Backend failures. `retryable` drives the retry loop.
#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("environment variable `{env}` is not set")]
    MissingApiKey { env: String },
    #[error("authentication failed with status {status}")]
    Auth { status: u16 },
    #[error("rate limited by provider")]
    RateLimited,
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("provider returned status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("provider rejected the output schema: {body}")]
    SchemaRejected { body: String },
    #[error("unexpected response shape: {0}")]
    MalformedResponse(String),
    #[error("no replay entry for fingerprint {fingerprint}")]
    FingerprintMiss { fingerprint: String },
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("gave up after {attempts} attempts: {source}")]
    Exhausted {
        attempts: u32,
        source: Box<BackendError>,
    },
}

impl BackendError {
    /// Whether another attempt could plausibly succeed.
    pub fn retryable(&self) -> bool {
        match self {
            BackendError::RateLimited
            | BackendError::Timeout
            | BackendError::Connect(_)
            | BackendError::MalformedResponse(_) => true,
            BackendError::Http { status, .. } => *status >= 500,
            BackendError::SchemaRejected { .. } => true,
            _ => false,
        }
    }
}

/// A transport performs one request attempt with no policy of its own.
pub trait Transport: Send + Sync {
    fn attempt(&self, request: &ChatRequest) -> Result<CompletionResult, BackendError>;
    fn name(&self) -> &str;
}

/// Retry policy with deterministic exponential backoff (no jitter, so runs
/// are reproducible).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay_ms: 250,
            max_delay_ms: 4000,
        }
    }
}

/// Delay before retrying after the given 1-based failed attempt.
pub fn backoff_delay(policy: &RetryPolicy, attempt: u32) -> Duration {
    let factor = 1u64 << attempt.saturating_sub(1).min(16);
    Duration::from_millis(policy.base_delay_ms.saturating_mul(factor).min(policy.max_delay_ms))
}

/// Counting semaphore bounding in-flight requests.
struct Semaphore {
    permits: Mutex<usize>,
    released: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.released.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock().expect("semaphore poisoned");
        *permits += 1;
        self.semaphore.released.notify_one();
    }
}

/// A transport wrapped with retry, schema fallback, and an in-flight cap.
pub struct Backend {
    transport: Box<dyn Transport>,
    retry: RetryPolicy,
    limiter: Semaphore,
}

impl Backend {
    pub fn new(transport: Box<dyn Transport>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Backend {
            transport,
            retry,
            limiter: Semaphore::new(max_in_flight),
        }
    }

    pub fn name(&self) -> &str {
        self.transport.name()
    }

    /// Runs a request to completion under the retry policy. A schema
    /// rejection strips the schema and keeps going; retryable failures back
    /// off exponentially; non-retryable failures return immediately.
    pub fn complete(&self, request: &ChatRequest) -> Result<CompletionResult, BackendError> {
        let _permit = self.limiter.acquire();
        let mut current = request.clone();
        let mut schema_dropped = false;
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.transport.attempt(&current) {
                Ok(mut result) => {
                    result.attempts = attempt;
                    result.schema_dropped = schema_dropped;
                    return Ok(result);
                }
                Err(BackendError::SchemaRejected { body }) if current.schema.is_some() => {
                    log::warn!(
                        "{}: provider rejected output schema, retrying without it",
                        self.transport.name()
                    );
                    let _ = body;
                    current.schema = None;
                    schema_dropped = true;
                    if attempt >= self.retry.max_attempts {
                        return Err(BackendError::Exhausted {
                            attempts: attempt,
                            source: Box::new(BackendError::SchemaRejected { body: String::new() }),
                        });
                    }
                }
                Err(err) if err.retryable() => {
                    if attempt >= self.retry.max_attempts {
                        return Err(BackendError::Exhausted {
                            attempts: attempt,
                            source: Box::new(err),
                        });
                    }
                    std::thread::sleep(backoff_delay(&self.retry, attempt));
                }
                Err(err) => return Err(err),
            }
        }
    }
}

/// Stable identifier for a request: the SHA-256 of the last user message,
/// which the prompt layout guarantees is exactly the chunk text.
pub fn fingerprint(request: &ChatRequest) -> String {
    let text = request
        .messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or_default();
    fingerprint_text(text)
}

/// Fingerprint of raw chunk text, for building replay tables directly.
pub fn fingerprint_text(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

// --- Provider configuration -------------------------------------------------

/// One provider entry from the providers file.
#[derive(Debug, Clone, Deserialize)]
pub struct ProviderEntry {
    pub base_url: String,
    pub api_key_env: String,
    pub default_model: String,
}

/// The providers file: named OpenAI-compatible endpoints.
#[derive(Debug, Clone, Deserialize)]
pub struct Providers {
    pub providers: HashMap<String, ProviderEntry>,
}

const BUNDLED_PROVIDERS: &str = include_str!("../assets/providers.toml");

impl Providers {
    pub fn load_from_str(source: &str) -> Result<Self, BackendError> {
        toml::from_str(source).map_err(|e| BackendError::Config(e.to_string()))
    }

    pub fn load_path(path: &Path) -> Result<Self, BackendError> {
        let source =
            std::fs::read_to_string(path).map_err(|e| BackendError::Config(e.to_string()))?;
        Self::load_from_str(&source)
    }

    pub fn bundled() -> Self {
        Self::load_from_str(BUNDLED_PROVIDERS).expect("bundled providers must parse")
    }

    pub fn get(&self, name: &str) -> Result<&ProviderEntry, BackendError> {
        self.providers.get(name).ok_or_else(|| {
            let mut known: Vec<&str> = self.providers.keys().map(String::as_str).collect();
            known.sort_unstable();
            BackendError::Config(format!(
                "unknown provider `{name}`; known providers: {}",
                known.join(", ")
            ))
        })
    }
}

/// Everything needed to build an HTTP transport.
#[derive(Clone)]
pub struct BackendConfig {
    pub provider: String,
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl BackendConfig {
    /// Resolves a provider name and optional model override.
    pub fn from_providers(
        providers: &Providers,
        provider: &str,
        model: Option<&str>,
    ) -> Result<Self, BackendError> {
        let entry = providers.get(provider)?;
        Ok(BackendConfig {
            provider: provider.to_string(),
            base_url: entry.base_url.clone(),
            model: model.unwrap_or(&entry.default_model).to_string(),
            api_key_env: entry.api_key_env.clone(),
            timeout_secs: 60,
        })
    }
}

impl fmt::Debug for BackendConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendConfig")
            .field("provider", &self.provider)
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("api_key_env", &self.api_key_env)
            .field("timeout_secs", &self.timeout_secs)
            .finish()
    }
}

/// API key held in memory; never printed.
struct ApiKey(String);

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(***)")
    }
}

// --- HTTP transport ----------------------------------------------------------

/// OpenAI-compatible `/chat/completions` transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: ApiKey,
    model: String,
    label: String,
}

impl fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpTransport")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key)
            .finish()
    }
}

/// Builds the JSON body for one request, attaching the structured-output
/// schema in the OpenAI `response_format` shape when present.
pub fn build_request_body(model: &str, request: &ChatRequest) -> Value {
    let mut body = json!({
        "model": model,
        "messages": request.messages,
        "temperature": request.temperature,
    });
    if let Some(schema) = &request.schema {
        body["response_format"] = json!({
            "type": "json_schema",
            "json_schema": {
                "name": "privacy_triples",
                "strict": true,
                "schema": schema,
            }
        });
    }
    body
}

impl HttpTransport {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        let key = std::env::var(&config.api_key_env).map_err(|_| BackendError::MissingApiKey {
            env: config.api_key_env.clone(),
        })?;
        let base = url::Url::parse(&config.base_url)
            .map_err(|e| BackendError::Config(format!("bad base URL: {e}")))?;
        let endpoint = format!("{}/chat/completions", base.as_str().trim_end_matches('/'));
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpTransport {
            client,
            endpoint,
            api_key: ApiKey(key),
            model: config.model.clone(),
            label: format!("{}:{}", config.provider, config.model),
        })
    }
}

impl Transport for HttpTransport {
    fn attempt(&self, request: &ChatRequest) -> Result<CompletionResult, BackendError> {
        let body = build_request_body(&self.model, request);
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key.0)
            .json(&body)
            .send()
            .map_err(|err| {
                if err.is_timeout() {
                    BackendError::Timeout
                } else if err.is_connect() {
                    BackendError::Connect(err.to_string())
                } else {
                    BackendError::Connect(err.to_string())
                }
            })?;

        let status = response.status().as_u16();
        let text = response.text().map_err(|e| {
            BackendError::MalformedResponse(format!("failed to read body: {e}"))
        })?;

        match status {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Auth { status }),
            429 => return Err(BackendError::RateLimited),
            400 if request.schema.is_some() => {
                return Err(BackendError::SchemaRejected { body: text })
            }
            _ => return Err(BackendError::Http { status, body: text }),
        }

        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedResponse(format!("body is not JSON: {e}")))?;
        let content = parsed["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| {
                BackendError::MalformedResponse("missing choices[0].message.content".to_string())
            })?;
        Ok(CompletionResult {
            content: content.to_string(),
            attempts: 1,
            schema_dropped: false,
        })
    }

    fn name(&self) -> &str {
        &self.label
    }
}

// --- Offline replay stub ------------------------------------------------------

/// Fault injected for a specific fingerprint in the stub transport.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultPlan {
    /// Respond with syntactically broken JSON.
    MalformedJson,
    /// Respond with the given content instead of the replay entry.
    ReplaceResponse { content: String },
    /// Replay the stored response but rewrite every item category.
    OverrideCategory { category: String },
    /// Replay the stored response but rewrite every item level.
    OverrideLevel { level: i64 },
    /// Fail the first `count` attempts with a retryable error, then replay.
    TransientErrors { count: u32 },
    /// Always fail with a non-retryable error.
    PermanentError,
}

/// One line of a replay file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub fingerprint: String,
    pub content: String,
}

/// Deterministic offline backend replaying canned responses by fingerprint.
#[derive(Default)]
pub struct StubTransport {
    replay: HashMap<String, String>,
    faults: HashMap<String, FaultPlan>,
    attempt_counters: Mutex<HashMap<String, u32>>,
}

impl StubTransport {
    pub fn new() -> Self {
        StubTransport::default()
    }

    /// Registers the response for a chunk text.
    pub fn insert_response(&mut self, chunk_text: &str, content: impl Into<String>) {
        self.replay
            .insert(fingerprint_text(chunk_text), content.into());
    }

    /// Registers a response by precomputed fingerprint.
    pub fn insert_fingerprint(&mut self, fingerprint: impl Into<String>, content: impl Into<String>) {
        self.replay.insert(fingerprint.into(), content.into());
    }

    /// Injects a fault for a chunk text.
    pub fn insert_fault(&mut self, chunk_text: &str, fault: FaultPlan) {
        self.faults.insert(fingerprint_text(chunk_text), fault);
    }

    pub fn len(&self) -> usize {
        self.replay.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replay.is_empty()
    }

    /// Loads a replay table from JSONL text (one `ReplayEntry` per line).
    pub fn from_replay_str(source: &str) -> Result<Self, BackendError> {
        let mut stub = StubTransport::new();
        for (idx, line) in source.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(line).map_err(|e| {
                BackendError::Config(format!("replay line {}: {e}", idx + 1))
            })?;
            stub.replay.insert(entry.fingerprint, entry.content);
        }
        Ok(stub)
    }

    pub fn from_replay_path(path: &Path) -> Result<Self, BackendError> {
        let source =
            std::fs::read_to_string(path).map_err(|e| BackendError::Config(e.to_string()))?;
        Self::from_replay_str(&source)
    }

    /// Serializes the replay table to JSONL, sorted by fingerprint for
    /// reproducible files.
    pub fn to_replay_string(&self) -> String {
        let mut entries: Vec<(&String, &String)> = self.replay.iter().collect();
        entries.sort_by_key(|(fp, _)| fp.as_str());
        let mut out = String::new();
        for (fingerprint, content) in entries {
            let entry = ReplayEntry {
                fingerprint: fingerprint.clone(),
                content: content.clone(),
            };
            out.push_str(&serde_json::to_string(&entry).expect("serializable"));
            out.push('\n');
        }
        out
    }

    fn apply_override(content: &str, fault: &FaultPlan) -> String {
        let Ok(mut value) = serde_json::from_str::<Value>(content) else {
            return content.to_string();
        };
        let items = match &mut value {
            Value::Array(items) => Some(items),
            Value::Object(map) => map.get_mut("triples").and_then(Value::as_array_mut),
            _ => None,
        };
        if let Some(items) = items {
            for item in items.iter_mut() {
                if let Some(obj) = item.as_object_mut() {
                    match fault {
                        FaultPlan::OverrideCategory { category } => {
                            obj.insert("category".to_string(), json!(category));
                        }
                        FaultPlan::OverrideLevel { level } => {
                            obj.insert("level".to_string(), json!(level));
                        }
                        _ => {}
                    }
                }
            }
        }
        value.to_string()
    }
}

impl Transport for StubTransport {
    fn attempt(&self, request: &ChatRequest) -> Result<CompletionResult, BackendError> {
        let fp = fingerprint(request);
        if let Some(fault) = self.faults.get(&fp) {
            match fault {
                FaultPlan::PermanentError => {
                    return Err(BackendError::Auth { status: 401 });
                }
                FaultPlan::TransientErrors { count } => {
                    let mut counters = self.attempt_counters.lock().expect("counter poisoned");
                    let seen = counters.entry(fp.clone()).or_insert(0);
                    *seen += 1;
                    if *seen <= *count {
                        return Err(BackendError::Http {
                            status: 503,
                            body: "synthetic transient failure".to_string(),
                        });
                    }
                }
                FaultPlan::MalformedJson => {
                    return Ok(CompletionResult {
                        content: "{\"triples\": [".to_string(),
                        attempts: 1,
                        schema_dropped: false,
                    });
                }
                FaultPlan::ReplaceResponse { content } => {
                    return Ok(CompletionResult {
                        content: content.clone(),
                        attempts: 1,
                        schema_dropped: false,
                    });
                }
                FaultPlan::OverrideCategory { .. } | FaultPlan::OverrideLevel { .. } => {
                    let content = self
                        .replay
                        .get(&fp)
                        .ok_or(BackendError::FingerprintMiss {
                            fingerprint: fp.clone(),
                        })?;
                    return Ok(CompletionResult {
                        content: Self::apply_override(content, fault),
                        attempts: 1,
                        schema_dropped: false,
                    });
                }
            }
        }
        match self.replay.get(&fp) {
            Some(content) => Ok(CompletionResult {
                content: content.clone(),
                attempts: 1,
                schema_dropped: false,
            }),
            None => Err(BackendError::FingerprintMiss { fingerprint: fp }),
        }
    }

    fn name(&self) -> &str {
        "stub"
    }
}
