//! Blocking JSON-over-HTTP with bounded retries, shared by the chat
//! generator and the embeddings provider.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "SCENEALIGN_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HttpError {
    #[error("remote returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("undecodable response: {0}")]
    Decode(String),
}

impl HttpError {
    fn retryable(&self) -> bool {
        match self {
            HttpError::Status { status, .. } => *status == 429 || *status >= 500,
            HttpError::Timeout | HttpError::Transport(_) => true,
            HttpError::Decode(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each subsequent one.
    pub base_delay_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 200,
            timeout_ms: 60_000,
        }
    }
}

const BODY_EXCERPT: usize = 200;

fn excerpt(body: &str) -> String {
    body.chars().take(BODY_EXCERPT).collect()
}

fn post_once(agent: &ureq::Agent, url: &str, token: Option<&str>, body: &Value) -> Result<Value, HttpError> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(t) = token {
        req = req.header("Authorization", format!("Bearer {t}"));
    }
    let mut resp = req.send_json(body).map_err(|e| match e {
        ureq::Error::Timeout(_) => HttpError::Timeout,
        other => HttpError::Transport(other.to_string()),
    })?;
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| HttpError::Transport(e.to_string()))?;
    if !(200..300).contains(&status) {
        return Err(HttpError::Status {
            status,
            body: excerpt(&text),
        });
    }
    serde_json::from_str(&text).map_err(|e| HttpError::Decode(format!("{e}: {}", excerpt(&text))))
}

/// POSTs `body` as JSON, retrying 429/5xx/transport failures with
/// exponential backoff.
pub fn post_json(url: &str, token: Option<&str>, body: &Value, policy: &RetryPolicy) -> Result<Value, HttpError> {
    let config = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(policy.timeout_ms)))
        .http_status_as_error(false)
        .build();
    let agent = ureq::Agent::new_with_config(config);
    let mut attempt = 0;
    loop {
        match post_once(&agent, url, token, body) {
            Ok(v) => return Ok(v),
            Err(e) if e.retryable() && attempt < policy.max_retries => {
                thread::sleep(Duration::from_millis(policy.base_delay_ms << attempt));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

pub fn token_from_env() -> Option<String> {
    std::env::var(API_KEY_ENV).ok().filter(|t| !t.is_empty())
}
