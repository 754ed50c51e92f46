//! Minimal OpenAI-compatible chat-completions client.
//!
//! Used only to export pair datasets against a real endpoint; training and
//! the acceptance suite never touch the network. The credential is read
//! from an environment variable (by default `COUNTERSTYLE_API_KEY`) before
//! any request is issued, and transient failures (5xx, transport errors)
//! are retried with exponential backoff. 4xx responses are treated as
//! permanent and fail immediately.

use crate::error::{Error, Result};
use serde_json::Value;
use std::time::Duration;

pub const API_KEY_ENV: &str = "COUNTERSTYLE_API_KEY";

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    /// Retries after the first attempt, for transient failures only.
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: API_KEY_ENV.to_string(),
            timeout_secs: 30,
            max_retries: 3,
            backoff_ms: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalReply {
    pub text: String,
    /// How many retries were needed before the successful attempt.
    pub retries: u32,
}

fn truncated(body: &str) -> String {
    const LIMIT: usize = 200;
    if body.len() > LIMIT {
        format!("{}…", &body[..LIMIT])
    } else {
        body.to_string()
    }
}

fn parse_reply(v: &Value) -> Option<String> {
    Some(v.get("choices")?.get(0)?.get("message")?.get("content")?.as_str()?.to_string())
}

/// One chat-completion round trip: POST /v1/chat/completions with the
/// prompt as a single user message, returning the first choice's text.
pub fn external_generate(
    cfg: &EndpointConfig,
    prompt: &str,
    temperature: f64,
    max_tokens: usize,
) -> Result<ExternalReply> {
    let key = std::env::var(&cfg.api_key_env)
        .map_err(|_| Error::MissingCredential(cfg.api_key_env.clone()))?;
    let url = format!("{}/v1/chat/completions", cfg.base_url.trim_end_matches('/'));
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(cfg.timeout_secs))
        .build();
    let body = serde_json::json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": temperature,
        "max_tokens": max_tokens,
    });
    let mut attempt = 0u32;
    loop {
        let result = agent
            .post(&url)
            .set("Authorization", &format!("Bearer {key}"))
            .send_json(body.clone());
        let transient_msg = match result {
            Ok(resp) => {
                let text = resp.into_string()?;
                let v: Value = serde_json::from_str(&text).map_err(|e| Error::Endpoint {
                    attempts: attempt + 1,
                    msg: format!("unparseable response body: {e}"),
                })?;
                return match parse_reply(&v) {
                    Some(reply) => Ok(ExternalReply { text: reply, retries: attempt }),
                    None => Err(Error::Endpoint {
                        attempts: attempt + 1,
                        msg: format!("missing choices[0].message.content in {}", truncated(&text)),
                    }),
                };
            }
            Err(ureq::Error::Status(code, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                let msg = format!("status {code}: {}", truncated(&body));
                if code < 500 {
                    return Err(Error::Endpoint { attempts: attempt + 1, msg });
                }
                msg
            }
            Err(ureq::Error::Transport(t)) => format!("transport: {t}"),
        };
        if attempt >= cfg.max_retries {
            return Err(Error::Endpoint { attempts: attempt + 1, msg: transient_msg });
        }
        std::thread::sleep(Duration::from_millis(cfg.backoff_ms << attempt));
        attempt += 1;
    }
}
