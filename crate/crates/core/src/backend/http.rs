use std::thread;
use std::time::Duration;

use log::warn;
use rand::Rng;
use serde_json::{json, Value};

use super::{Backend, Completion, CompletionRequest};
use crate::error::{Error, Result};

/// Exponential backoff for transient transport failures.
#[derive(Clone, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based count of failures so far).
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self.factor.powi(attempt.saturating_sub(1) as i32);
        let scale = if self.jitter {
            0.5 + rand::rng().random::<f64>()
        } else {
            1.0
        };
        self.base_delay.mul_f64(exp * scale)
    }
}

#[derive(Clone, Debug)]
pub struct HttpConfig {
    /// Full URL of the chat-completion endpoint.
    pub endpoint: String,
    pub model: String,
    pub api_key: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

/// Client for an HTTP JSON chat-completion endpoint.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

enum Failure {
    Retryable(String),
    Fatal(Error),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend { config, agent }
    }

    /// Reads the credential from `api_key_env`.
    pub fn from_env(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key_env: &str,
        timeout: Duration,
        retry: RetryPolicy,
    ) -> Result<Self> {
        let api_key = std::env::var(api_key_env).map_err(|_| {
            Error::Config(format!("environment variable {api_key_env} is not set"))
        })?;
        Ok(Self::new(HttpConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            timeout,
            retry,
        }))
    }

    /// The JSON body sent for `req`. Identical requests yield identical bodies.
    pub fn request_body(&self, req: &CompletionRequest) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        })
    }

    fn attempt(&self, body: &Value) -> Result<Completion, Failure> {
        let mut resp = match self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.config.api_key))
            .header("Content-Type", "application/json")
            .send(body.to_string())
        {
            Ok(r) => r,
            Err(e) => return Err(Failure::Retryable(e.to_string())),
        };
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => {
                return Err(Failure::Fatal(Error::Config(format!(
                    "endpoint rejected credentials (HTTP {status})"
                ))))
            }
            408 | 409 | 429 | 500..=599 => return Err(Failure::Retryable(format!("HTTP {status}"))),
            _ => {
                let detail = resp.body_mut().read_to_string().unwrap_or_default();
                return Err(Failure::Fatal(Error::Transport {
                    attempts: 1,
                    message: format!("HTTP {status}: {detail}"),
                }));
            }
        }
        let raw = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Retryable(format!("unreadable response body: {e}")))?;
        let value: Value = serde_json::from_str(&raw)
            .map_err(|e| Failure::Retryable(format!("response is not JSON: {e}")))?;
        parse_response(&value).map_err(Failure::Fatal)
    }
}

fn parse_response(v: &Value) -> Result<Completion> {
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Transport {
            attempts: 1,
            message: "response has no choices[0].message.content".into(),
        })?;
    let usage = |field: &str| {
        v.pointer(&format!("/usage/{field}"))
            .and_then(Value::as_u64)
            .unwrap_or(0)
    };
    Ok(Completion {
        text: text.to_string(),
        prompt_tokens: usage("prompt_tokens"),
        output_tokens: usage("completion_tokens"),
        backend_tag: "http".into(),
    })
}

impl Backend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion> {
        let body = self.request_body(req);
        let max = self.config.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.attempt(&body) {
                Ok(c) => return Ok(c),
                Err(Failure::Fatal(Error::Transport { message, .. })) => {
                    return Err(Error::Transport { attempts: attempt, message })
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => {
                    warn!("{} attempt {attempt}/{max} failed: {msg}", req.key());
                    last = msg;
                    if attempt < max {
                        thread::sleep(self.config.retry.delay(attempt));
                    }
                }
            }
        }
        Err(Error::Transport {
            attempts: max,
            message: last,
        })
    }
}
