use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendConfig, ChatBackend, ChatRequest, ChatResponse, RetryPolicy, Usage};
use crate::error::{Error, Result};

/// OpenAI-compatible `/chat/completions` client with retry on transport
/// errors, 5xx and 429.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    model: String,
    retry: RetryPolicy,
}

impl HttpBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self> {
        let base = config
            .endpoint_url
            .as_deref()
            .filter(|u| !u.is_empty())
            .ok_or_else(|| Error::Config(vec!["http backend requires endpoint_url".into()]))?;
        Ok(HttpBackend {
            agent: build_agent(Duration::from_millis(config.timeout_ms)),
            url: endpoint(base, "chat/completions"),
            api_key: config.api_key.clone(),
            model: config.model_name.clone(),
            retry: config.retry.clone(),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

pub(crate) fn build_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

/// Appends `path` to a base URL unless the URL already ends with it.
pub(crate) fn endpoint(base: &str, path: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with(path) {
        base.to_string()
    } else {
        format!("{base}/{path}")
    }
}

/// POSTs `body` and returns the parsed JSON plus the attempt count. Retries
/// transport failures, 5xx and 429 with the policy's backoff; other
/// statuses fail immediately.
pub fn post_json_with_retry(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
    retry: &RetryPolicy,
) -> Result<(Value, u32)> {
    let payload = serde_json::to_string(body)?;
    let max_attempts = retry.max_attempts.max(1);
    let mut last_status = String::from("no attempt made");
    for attempt in 1..=max_attempts {
        if attempt > 1 {
            std::thread::sleep(retry.backoff(attempt - 1));
        }
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send(payload.as_str()) {
            Ok(r) => r,
            Err(e) => {
                last_status = format!("transport error: {e}");
                log::warn!("POST {url} attempt {attempt}/{max_attempts}: {last_status}");
                continue;
            }
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        if (200..300).contains(&status) {
            let value: Value = serde_json::from_str(&text).map_err(|e| Error::BackendUnavailable {
                attempts: attempt,
                last_status: format!("HTTP {status} with unparseable body: {e}"),
            })?;
            return Ok((value, attempt));
        }
        last_status = format!("HTTP {status}: {}", truncate(&text, 200));
        if status != 429 && status < 500 {
            return Err(Error::BackendUnavailable {
                attempts: attempt,
                last_status,
            });
        }
        log::warn!("POST {url} attempt {attempt}/{max_attempts}: {last_status}");
    }
    Err(Error::BackendUnavailable {
        attempts: max_attempts,
        last_status,
    })
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let mut messages = Vec::with_capacity(2);
        if !request.system.is_empty() {
            messages.push(json!({"role": "system", "content": request.system}));
        }
        messages.push(json!({"role": "user", "content": request.user}));
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let (value, attempts) =
            post_json_with_retry(&self.agent, &self.url, self.api_key.as_deref(), &body, &self.retry)?;
        let text = value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::BackendUnavailable {
                attempts,
                last_status: "response lacks choices[0].message.content".into(),
            })?
            .to_string();
        let count = |p: &str| value.pointer(p).and_then(Value::as_u64).unwrap_or(0);
        Ok(ChatResponse {
            text,
            usage: Usage {
                prompt_tokens: count("/usage/prompt_tokens"),
                completion_tokens: count("/usage/completion_tokens"),
            },
            attempts,
        })
    }
}
