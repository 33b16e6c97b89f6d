//! Client for generative-LLM calls with an on-disk content-addressed cache
//! and a replay mode that serves recorded responses without any network
//! access.
//!
//! Requests are keyed by the SHA-256 of their canonical JSON form (sorted
//! keys, no insignificant whitespace). Cache entries and replay fixtures
//! share one file layout, `<dir>/<key>.json`, so a warm cache directory can
//! be handed to another run as its fixtures directory.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_ENDPOINT: &str = "NEURONSCOPE_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "NEURONSCOPE_LLM_API_KEY";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gateway misconfigured: {0}")]
    Config(String),
    #[error("no replay fixture for request {hash}")]
    ReplayMiss { hash: String },
    #[error("cache miss for request {hash} and no live endpoint configured")]
    CacheMiss { hash: String },
    #[error("corrupt cache entry {path}: {message}")]
    CorruptEntry { path: String, message: String },
    #[error("HTTP {status} from backend: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("request failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed backend payload: {0}")]
    MalformedPayload(String),
    #[error("cache I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub model_id: String,
    pub prompt: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

impl LlmRequest {
    pub fn new(model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            prompt: prompt.into(),
            max_output_tokens: 64,
            temperature: 0.0,
        }
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Sorted-key compact JSON.
    pub fn canonical_json(&self) -> String {
        // serde_json's default map is a BTreeMap, so keys come out sorted.
        let v = json!({
            "max_output_tokens": self.max_output_tokens,
            "model_id": self.model_id,
            "prompt": self.prompt,
            "temperature": self.temperature,
        });
        serde_json::to_string(&v).expect("request serializes")
    }

    /// Lowercase hex SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn cache_key(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseSource {
    Live,
    Cache,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmResponse {
    pub text: String,
    pub source: ResponseSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Live,
    #[default]
    Cache,
    Replay,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Mode::Live),
            "cache" => Ok(Mode::Cache),
            "replay" => Ok(Mode::Replay),
            _ => Err(format!(
                "unknown mode {s:?} (expected live, cache or replay)"
            )),
        }
    }
}

/// How requests are encoded for the backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WireFormat {
    /// `{model, prompt, max_tokens, temperature}` -> `{text}`.
    #[default]
    Simple,
    /// OpenAI-style `/chat/completions`.
    ChatCompletions,
}

impl std::str::FromStr for WireFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simple" => Ok(WireFormat::Simple),
            "chat-completions" => Ok(WireFormat::ChatCompletions),
            _ => Err(format!("unknown wire format {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Sleep before attempt `attempt + 1` (1-based `attempt`).
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff
            .saturating_mul(1u32 << (attempt.saturating_sub(1)).min(16))
    }
}

/// Status codes worth retrying: 429 and 5xx.
pub fn is_retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub mode: Mode,
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub fixtures_dir: Option<PathBuf>,
    pub max_in_flight: usize,
    pub wire_format: WireFormat,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cache,
            endpoint: None,
            api_key: None,
            cache_dir: None,
            fixtures_dir: None,
            max_in_flight: 4,
            wire_format: WireFormat::Simple,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }
}

impl GatewayConfig {
    pub fn replay(fixtures_dir: impl Into<PathBuf>) -> Self {
        Self {
            mode: Mode::Replay,
            fixtures_dir: Some(fixtures_dir.into()),
            ..Self::default()
        }
    }

    /// Fills endpoint and API key from the environment where unset.
    pub fn with_env(mut self) -> Self {
        if self.endpoint.is_none() {
            self.endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty());
        }
        if self.api_key.is_none() {
            self.api_key = std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty());
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Failure below the HTTP status layer (connect, TLS, timeout, ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError(pub String);

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Sends one JSON POST. Swappable so tests can count and script calls.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &str,
    ) -> Result<HttpReply, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &str,
    ) -> Result<HttpReply, TransportError> {
        let mut req = self
            .agent
            .post(url)
            .header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

/// On-disk record shared by the cache and replay fixtures. Only
/// `response_text` is required when reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<LlmRequest>,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl CacheEntry {
    pub fn for_request(req: &LlmRequest, response_text: impl Into<String>) -> Self {
        Self {
            request: Some(req.clone()),
            response_text: response_text.into(),
            model_id: Some(req.model_id.clone()),
            timestamp: None,
        }
    }
}

pub fn entry_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.json"))
}

/// Reads the entry for `key`, `Ok(None)` when absent.
pub fn read_entry(dir: &Path, key: &str) -> Result<Option<CacheEntry>, GatewayError> {
    let path = entry_path(dir, key);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(source) => {
            return Err(GatewayError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    };
    let entry: CacheEntry =
        serde_json::from_slice(&bytes).map_err(|e| GatewayError::CorruptEntry {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    if let Some(req) = &entry.request {
        if req.cache_key() != key {
            return Err(GatewayError::CorruptEntry {
                path: path.display().to_string(),
                message: "stored request does not hash to the file name".into(),
            });
        }
    }
    Ok(Some(entry))
}

/// Writes an entry via temp file + rename.
pub fn write_entry(dir: &Path, key: &str, entry: &CacheEntry) -> Result<(), GatewayError> {
    let path = entry_path(dir, key);
    let io = |source| GatewayError::Io {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut bytes = serde_json::to_vec_pretty(entry).expect("entry serializes");
    bytes.push(b'\n');
    crate::write_atomic(&path, &bytes).map_err(io)
}

pub struct Gateway {
    config: GatewayConfig,
    transport: Option<Arc<dyn Transport>>,
    live_calls: AtomicU64,
}

impl Gateway {
    /// Builds a gateway; an HTTP transport is created only when an endpoint
    /// is configured and the mode can reach the network.
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        let transport: Option<Arc<dyn Transport>> = match (config.mode, &config.endpoint) {
            (Mode::Replay, _) | (_, None) => None,
            (_, Some(_)) => Some(Arc::new(UreqTransport::new(config.timeout))),
        };
        Self::build(config, transport)
    }

    pub fn with_transport(
        config: GatewayConfig,
        transport: Arc<dyn Transport>,
    ) -> Result<Self, GatewayError> {
        Self::build(config, Some(transport))
    }

    fn build(
        config: GatewayConfig,
        transport: Option<Arc<dyn Transport>>,
    ) -> Result<Self, GatewayError> {
        match config.mode {
            Mode::Replay if config.fixtures_dir.is_none() => {
                return Err(GatewayError::Config(
                    "replay mode needs a fixtures directory".into(),
                ))
            }
            Mode::Cache if config.cache_dir.is_none() => {
                return Err(GatewayError::Config(
                    "cache mode needs a cache directory".into(),
                ))
            }
            Mode::Live if config.endpoint.is_none() => {
                return Err(GatewayError::Config(
                    "live mode needs an endpoint URL".into(),
                ))
            }
            _ => {}
        }
        if config.max_in_flight == 0 {
            return Err(GatewayError::Config(
                "max_in_flight must be at least 1".into(),
            ));
        }
        Ok(Self {
            config,
            transport,
            live_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Number of logical live requests issued so far (retries excluded).
    pub fn live_calls(&self) -> u64 {
        self.live_calls.load(Ordering::Relaxed)
    }

    pub fn request(&self, req: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        req.validate()?;
        let key = req.cache_key();
        match self.config.mode {
            Mode::Replay => {
                let dir = self
                    .config
                    .fixtures_dir
                    .as_deref()
                    .expect("checked in build");
                match read_entry(dir, &key)? {
                    Some(e) => Ok(LlmResponse {
                        text: e.response_text,
                        source: ResponseSource::Replay,
                    }),
                    None => Err(GatewayError::ReplayMiss { hash: key }),
                }
            }
            Mode::Cache => {
                let dir = self.config.cache_dir.as_deref().expect("checked in build");
                if let Some(e) = read_entry(dir, &key)? {
                    return Ok(LlmResponse {
                        text: e.response_text,
                        source: ResponseSource::Cache,
                    });
                }
                if self.transport.is_none() {
                    return Err(GatewayError::CacheMiss { hash: key });
                }
                self.live(req, &key)
            }
            Mode::Live => self.live(req, &key),
        }
    }

    fn live(&self, req: &LlmRequest, key: &str) -> Result<LlmResponse, GatewayError> {
        let transport = self
            .transport
            .as_ref()
            .ok_or_else(|| GatewayError::Config("no transport for live request".into()))?;
        let url = self
            .config
            .endpoint
            .as_deref()
            .ok_or_else(|| GatewayError::Config("no endpoint configured".into()))?;
        self.live_calls.fetch_add(1, Ordering::Relaxed);
        let body = encode_body(self.config.wire_format, req);

        let policy = self.config.retry;
        let attempts = policy.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match transport.post_json(url, self.config.api_key.as_deref(), &body) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let text = decode_body(self.config.wire_format, &reply.body)?;
                    if let Some(dir) = &self.config.cache_dir {
                        let mut entry = CacheEntry::for_request(req, text.clone());
                        entry.timestamp = SystemTime::now()
                            .duration_since(UNIX_EPOCH)
                            .ok()
                            .map(|d| d.as_secs());
                        write_entry(dir, key, &entry)?;
                    }
                    return Ok(LlmResponse {
                        text,
                        source: ResponseSource::Live,
                    });
                }
                Ok(reply) if is_retryable_status(reply.status) => {
                    last = format!("HTTP {}", reply.status);
                }
                Ok(reply) => {
                    return Err(GatewayError::HttpStatus {
                        status: reply.status,
                        body: reply.body,
                    })
                }
                Err(e) => last = e.0,
            }
            if attempt < attempts {
                log::warn!("LLM request {key} attempt {attempt} failed ({last}); retrying");
                std::thread::sleep(policy.backoff(attempt));
            }
        }
        Err(GatewayError::RetriesExhausted { attempts, last })
    }

    /// Runs `reqs` with at most `max_in_flight` requests outstanding.
    /// Results line up with the input; failures stay per item.
    pub fn request_batch(
        &self,
        reqs: &[LlmRequest],
        max_in_flight: usize,
    ) -> Vec<Result<LlmResponse, GatewayError>> {
        let workers = max_in_flight.max(1).min(reqs.len());
        if workers <= 1 {
            return reqs.iter().map(|r| self.request(r)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<LlmResponse, GatewayError>>>> =
            Mutex::new((0..reqs.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= reqs.len() {
                        break;
                    }
                    let r = self.request(&reqs[i]);
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect()
    }
}

pub fn encode_body(format: WireFormat, req: &LlmRequest) -> String {
    let v = match format {
        WireFormat::Simple => json!({
            "model": req.model_id,
            "prompt": req.prompt,
            "max_tokens": req.max_output_tokens,
            "temperature": req.temperature,
        }),
        WireFormat::ChatCompletions => json!({
            "model": req.model_id,
            "messages": [{"role": "user", "content": req.prompt}],
            "max_tokens": req.max_output_tokens,
            "temperature": req.temperature,
        }),
    };
    v.to_string()
}

/// Extracts the generated text. An empty text is accepted only when the
/// backend marks it with `"empty": true`.
pub fn decode_body(format: WireFormat, body: &str) -> Result<String, GatewayError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| GatewayError::MalformedPayload(e.to_string()))?;
    let text = match format {
        WireFormat::Simple => v.get("text"),
        WireFormat::ChatCompletions => v.pointer("/choices/0/message/content"),
    }
    .and_then(Value::as_str)
    .ok_or_else(|| GatewayError::MalformedPayload("no text field in response".into()))?;
    if text.is_empty() && v.get("empty").and_then(Value::as_bool) != Some(true) {
        return Err(GatewayError::MalformedPayload(
            "empty text without empty-response flag".into(),
        ));
    }
    Ok(text.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_sorted_and_compact() {
        let r = LlmRequest::new("m", "hi");
        assert_eq!(
            r.canonical_json(),
            r#"{"max_output_tokens":64,"model_id":"m","prompt":"hi","temperature":0.0}"#
        );
        assert_eq!(r.cache_key().len(), 64);
        assert_eq!(r.cache_key(), LlmRequest::new("m", "hi").cache_key());
        assert_ne!(r.cache_key(), LlmRequest::new("m2", "hi").cache_key());
    }

    #[test]
    fn invalid_requests() {
        assert!(LlmRequest::new("m", "").validate().is_err());
        let mut r = LlmRequest::new("m", "p");
        r.temperature = -0.5;
        assert!(r.validate().is_err());
        r.temperature = f64::NAN;
        assert!(r.validate().is_err());
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(1), Duration::from_secs(1));
        assert_eq!(p.backoff(2), Duration::from_secs(2));
        assert_eq!(p.backoff(3), Duration::from_secs(4));
    }

    #[test]
    fn retryable_statuses() {
        assert!(is_retryable_status(429));
        assert!(is_retryable_status(500));
        assert!(is_retryable_status(503));
        assert!(!is_retryable_status(400));
        assert!(!is_retryable_status(404));
    }

    #[test]
    fn decode_formats() {
        assert_eq!(
            decode_body(WireFormat::Simple, r#"{"text":"Yes"}"#).unwrap(),
            "Yes"
        );
        assert!(decode_body(WireFormat::Simple, r#"{"text":""}"#).is_err());
        assert_eq!(
            decode_body(WireFormat::Simple, r#"{"text":"","empty":true}"#).unwrap(),
            ""
        );
        assert!(decode_body(WireFormat::Simple, r#"{"answer":"x"}"#).is_err());
        assert!(decode_body(WireFormat::Simple, "not json").is_err());
        let chat = r#"{"choices":[{"message":{"role":"assistant","content":"No"}}]}"#;
        assert_eq!(
            decode_body(WireFormat::ChatCompletions, chat).unwrap(),
            "No"
        );
    }

    #[test]
    fn encode_simple_shape() {
        let v: Value =
            serde_json::from_str(&encode_body(WireFormat::Simple, &LlmRequest::new("m", "p")))
                .unwrap();
        assert_eq!(v["model"], "m");
        assert_eq!(v["prompt"], "p");
        assert_eq!(v["max_tokens"], 64);
        assert_eq!(v["temperature"], 0.0);
    }

    #[test]
    fn config_validation() {
        let c = GatewayConfig {
            mode: Mode::Replay,
            ..GatewayConfig::default()
        };
        assert!(matches!(Gateway::new(c), Err(GatewayError::Config(_))));
        let c = GatewayConfig {
            mode: Mode::Live,
            ..GatewayConfig::default()
        };
        assert!(matches!(Gateway::new(c), Err(GatewayError::Config(_))));
    }

    #[test]
    fn entry_integrity_check() {
        let dir = tempfile::tempdir().unwrap();
        let req = LlmRequest::new("m", "p");
        let other = LlmRequest::new("m", "q");
        write_entry(
            dir.path(),
            &other.cache_key(),
            &CacheEntry::for_request(&req, "x"),
        )
        .unwrap();
        assert!(matches!(
            read_entry(dir.path(), &other.cache_key()),
            Err(GatewayError::CorruptEntry { .. })
        ));
        assert!(read_entry(dir.path(), &req.cache_key()).unwrap().is_none());
    }
}
