//! Chat-completion backends behind one trait, selected by name at runtime.
//!
//! `http` speaks the OpenAI-compatible chat-completions protocol, `replay`
//! serves responses from a recorded cassette, and [`ScriptedBackend`] lets
//! callers plug in a closure. [`LlmClient`] adds request validation and
//! bounded-parallel batching on top of any backend.

mod http;
mod replay;
mod scripted;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) use http::{build_agent as http_agent, endpoint as http_endpoint};
pub use http::{post_json_with_retry, HttpBackend};
pub use replay::{record_cassette, Cassette, CassetteEntry, RecordingBackend, ReplayBackend};
pub use scripted::ScriptedBackend;

pub const ENDPOINT_ENV: &str = "PHENOKG_ENDPOINT_URL";
pub const API_KEY_ENV: &str = "PHENOKG_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Caller-supplied correlation id; not part of the request hash.
    pub request_tag: String,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest {
            system: system.into(),
            user: user.into(),
            temperature: 0.0,
            max_tokens: 2048,
            request_tag: String::new(),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.request_tag = tag.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.user.is_empty() {
            return Err(Error::domain("chat request has an empty user message"));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::domain(format!("invalid temperature {}", self.temperature)));
        }
        Ok(())
    }

    /// Stable content hash of `(system, user)`, hex-encoded SHA-256.
    pub fn hash(&self) -> String {
        request_hash(&self.system, &self.user)
    }
}

pub fn request_hash(system: &str, user: &str) -> String {
    let mut h = Sha256::new();
    h.update((system.len() as u64).to_le_bytes());
    h.update(system.as_bytes());
    h.update(user.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_backoff_ms: 500,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): exponential, capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        let ms = self
            .base_backoff_ms
            .saturating_mul(factor)
            .min(self.max_backoff_ms.max(self.base_backoff_ms));
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Registered backend name, `http` or `replay` out of the box.
    pub kind: String,
    pub endpoint_url: Option<String>,
    pub api_key: Option<String>,
    pub model_name: String,
    pub retry: RetryPolicy,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub cassette: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: "replay".into(),
            endpoint_url: None,
            api_key: None,
            model_name: "Qwen2.5-72B".into(),
            retry: RetryPolicy::default(),
            timeout_ms: 120_000,
            max_in_flight: 4,
            cassette: None,
        }
    }
}

impl BackendConfig {
    /// Applies endpoint/API-key environment overrides when set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(url) = std::env::var(ENDPOINT_ENV) {
            if !url.is_empty() {
                self.endpoint_url = Some(url);
            }
        }
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        self
    }

    /// Returns every problem found, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self.kind.as_str() {
            "http" if self.endpoint_url.as_deref().unwrap_or("").is_empty() => {
                out.push("backend.kind = http requires backend.endpoint_url".into())
            }
            "replay" if self.cassette.is_none() => out.push("backend.kind = replay requires backend.cassette".into()),
            _ => {}
        }
        if self.retry.max_attempts == 0 {
            out.push("backend.retry.max_attempts must be at least 1".into());
        }
        if self.max_in_flight == 0 {
            out.push("backend.max_in_flight must be at least 1".into());
        }
        if self.timeout_ms == 0 {
            out.push("backend.timeout_ms must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse>;
}

pub type BackendFactory = fn(&BackendConfig) -> Result<Box<dyn ChatBackend>>;

/// Name → constructor table for chat backends.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut reg = BackendRegistry {
            factories: BTreeMap::new(),
        };
        reg.register("http", |cfg| Ok(Box::new(HttpBackend::from_config(cfg)?)));
        reg.register("replay", |cfg| Ok(Box::new(ReplayBackend::from_config(cfg)?)));
        reg
    }
}

impl BackendRegistry {
    pub fn register(&mut self, name: &str, factory: BackendFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, config: &BackendConfig) -> Result<Box<dyn ChatBackend>> {
        let factory = self.factories.get(&config.kind).ok_or_else(|| {
            Error::Config(vec![format!(
                "unknown backend kind `{}` (known: {})",
                config.kind,
                self.names().collect::<Vec<_>>().join(", ")
            )])
        })?;
        config.validate()?;
        factory(config)
    }
}

/// A backend plus the concurrency bound used for batches.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    max_in_flight: usize,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>, max_in_flight: usize) -> Self {
        LlmClient {
            backend,
            max_in_flight: max_in_flight.max(1),
        }
    }

    pub fn from_config(registry: &BackendRegistry, config: &BackendConfig) -> Result<Self> {
        Ok(Self::new(Arc::from(registry.build(config)?), config.max_in_flight))
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        request.validate()?;
        self.backend.complete(request)
    }

    /// Runs all requests with at most `max_in_flight` outstanding at once.
    /// Results are positional; a failing entry does not affect the others.
    pub fn complete_batch(&self, requests: &[ChatRequest]) -> Vec<Result<ChatResponse>> {
        if requests.is_empty() {
            return Vec::new();
        }
        let workers = self.max_in_flight.min(requests.len());
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<ChatResponse>>>> = Mutex::new((0..requests.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= requests.len() {
                        break;
                    }
                    let result = self.complete(&requests[i]);
                    slots.lock().expect("batch slot lock")[i] = Some(result);
                });
            }
        });
        slots
            .into_inner()
            .expect("batch slot lock")
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    #[test]
    fn hash_ignores_tag_but_not_content() {
        let a = ChatRequest::new("sys", "user").with_tag("one");
        let b = ChatRequest::new("sys", "user").with_tag("two");
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ChatRequest::new("sys", "user!").hash());
        // length prefix keeps the system/user boundary unambiguous
        assert_ne!(request_hash("ab", "c"), request_hash("a", "bc"));
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn backoff_is_non_decreasing_and_capped() {
        let p = RetryPolicy {
            max_attempts: 40,
            base_backoff_ms: 100,
            max_backoff_ms: 5_000,
        };
        let delays: Vec<Duration> = (1..40).map(|r| p.backoff(r)).collect();
        assert_eq!(delays[0], Duration::from_millis(100));
        assert_eq!(delays[1], Duration::from_millis(200));
        assert!(delays.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*delays.last().unwrap(), Duration::from_millis(5_000));
    }

    #[test]
    fn config_problems_are_all_listed() {
        let cfg = BackendConfig {
            kind: "http".into(),
            max_in_flight: 0,
            retry: RetryPolicy {
                max_attempts: 0,
                ..RetryPolicy::default()
            },
            ..BackendConfig::default()
        };
        assert_eq!(cfg.problems().len(), 3);
    }

    #[test]
    fn registry_rejects_unknown_kind() {
        let reg = BackendRegistry::default();
        assert_eq!(reg.names().collect::<Vec<_>>(), vec!["http", "replay"]);
        let cfg = BackendConfig {
            kind: "carrier-pigeon".into(),
            ..BackendConfig::default()
        };
        assert!(matches!(reg.build(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn request_validation() {
        let client = LlmClient::new(Arc::new(ScriptedBackend::constant("ok")), 1);
        assert!(client.complete(&ChatRequest::new("s", "")).is_err());
        let mut r = ChatRequest::new("s", "u");
        r.temperature = f64::NAN;
        assert!(client.complete(&r).is_err());
    }

    #[test]
    fn batch_isolates_failures() {
        let calls = Arc::new(AtomicU32::new(0));
        let c = calls.clone();
        let backend = ScriptedBackend::new(move |req, _| {
            c.fetch_add(1, Ordering::SeqCst);
            if req.user == "boom" {
                Err(Error::BackendUnavailable {
                    attempts: 1,
                    last_status: "HTTP 500".into(),
                })
            } else {
                Ok(req.user.to_uppercase())
            }
        });
        let client = LlmClient::new(Arc::new(backend), 2);
        let reqs = vec![
            ChatRequest::new("", "a"),
            ChatRequest::new("", "boom"),
            ChatRequest::new("", "c"),
        ];
        let out = client.complete_batch(&reqs);
        assert_eq!(out[0].as_ref().unwrap().text, "A");
        assert!(out[1].is_err());
        assert_eq!(out[2].as_ref().unwrap().text, "C");
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        let single = client.complete_batch(&reqs[..1]);
        assert_eq!(single[0].as_ref().unwrap(), &client.complete(&reqs[0]).unwrap());
    }
}
