//! Chat-completions transport with retries and a shared request-rate limiter.

use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{Agent, AgentReply, TurnContext, TurnView, UsageStats};
use crate::error::AgentError;
use crate::temporal::Millis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            initial_backoff_ms: 500,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff before retry number `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteSpec {
    /// e.g. `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    /// Reasoning controls, merged verbatim into the request body.
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub reasoning: Map<String, Value>,
    /// Sampling overrides, merged verbatim into the request body. Empty means provider defaults.
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub sampling: Map<String, Value>,
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub headers: std::collections::BTreeMap<String, String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Record unreported reasoning tokens as 0 instead of absent.
    #[serde(default)]
    pub absent_reasoning_as_zero: bool,
}

fn default_timeout() -> u64 {
    180
}

impl RemoteSpec {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.model.trim().is_empty() {
            return Err(AgentError::InvalidSpec("remote agent needs a model identifier".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(AgentError::InvalidSpec("remote agent needs a base_url".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(AgentError::InvalidSpec("retry.max_attempts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    pub fn request_body(&self, ctx: &TurnContext) -> Value {
        let mut body = Map::new();
        body.insert("model".into(), Value::String(self.model.clone()));
        body.insert("messages".into(), json!(ctx.wire_messages()));
        for (k, v) in self.sampling.iter().chain(self.reasoning.iter()) {
            body.insert(k.clone(), v.clone());
        }
        Value::Object(body)
    }
}

/// Token bucket shared by every remote agent in a process.
#[derive(Debug)]
pub struct RateLimiter {
    per_second: f64,
    burst: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(per_second: f64, burst: u32) -> Self {
        let burst = burst.max(1) as f64;
        RateLimiter {
            per_second,
            burst,
            state: Mutex::new((burst, Instant::now())),
        }
    }

    /// Block until one request may be sent.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut guard = self.state.lock().expect("rate limiter poisoned");
                let (tokens, last) = &mut *guard;
                let now = Instant::now();
                *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * self.per_second)
                    .min(self.burst);
                *last = now;
                if *tokens >= 1.0 {
                    *tokens -= 1.0;
                    return;
                }
                (1.0 - *tokens) / self.per_second
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

pub struct RemoteAgent {
    spec: RemoteSpec,
    api_key: String,
    client: reqwest::blocking::Client,
    limiter: Option<Arc<RateLimiter>>,
}

impl RemoteAgent {
    pub fn new(spec: RemoteSpec, limiter: Option<Arc<RateLimiter>>) -> Result<Self, AgentError> {
        spec.validate()?;
        let api_key = std::env::var(&spec.api_key_env)
            .map_err(|_| AgentError::MissingApiKey(spec.api_key_env.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(spec.timeout_secs))
            .build()
            .map_err(|e| AgentError::Transport(e.to_string()))?;
        Ok(RemoteAgent {
            spec,
            api_key,
            client,
            limiter,
        })
    }

    fn send_once(&self, body: &Value) -> Result<(String, UsageStats), AgentError> {
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let mut req = self
            .client
            .post(self.spec.endpoint())
            .bearer_auth(&self.api_key)
            .json(body);
        for (k, v) in &self.spec.headers {
            req = req.header(k, v);
        }
        let started = Instant::now();
        let resp = req.send().map_err(|e| AgentError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| AgentError::Transport(e.to_string()))?;
        let elapsed = Millis(started.elapsed().as_millis() as u64);
        if status == 429 {
            return Err(AgentError::RateLimited);
        }
        if !(200..300).contains(&status) {
            return Err(AgentError::HttpStatus { status, body: text });
        }
        let mut parsed = parse_completion(&text, self.spec.absent_reasoning_as_zero)?;
        parsed.1.generation_ms = Some(elapsed);
        Ok(parsed)
    }
}

fn retryable(e: &AgentError) -> bool {
    match e {
        AgentError::Transport(_) | AgentError::RateLimited => true,
        AgentError::HttpStatus { status, .. } => *status >= 500,
        _ => false,
    }
}

impl Agent for RemoteAgent {
    fn next_action(&mut self, ctx: &TurnContext, _view: &TurnView<'_>) -> Result<AgentReply, AgentError> {
        let body = self.spec.request_body(ctx);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.send_once(&body) {
                Ok((raw, usage)) => return Ok(AgentReply { raw, usage }),
                Err(e) if retryable(&e) && attempt < self.spec.retry.max_attempts => {
                    log::warn!("{}: attempt {attempt} failed: {e}", self.spec.model);
                    thread::sleep(self.spec.retry.backoff(attempt));
                }
                Err(e) if retryable(&e) => {
                    return Err(AgentError::ExhaustedRetries {
                        attempts: attempt,
                        last: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Extract assistant text and token usage from a chat-completions response body.
pub fn parse_completion(body: &str, absent_reasoning_as_zero: bool) -> Result<(String, UsageStats), AgentError> {
    let v: Value = serde_json::from_str(body).map_err(|e| AgentError::BadResponse(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| AgentError::BadResponse("missing choices[0].message.content".into()))?;
    let num = |path: &str| v.pointer(path).and_then(Value::as_u64);
    let reasoning = num("/usage/completion_tokens_details/reasoning_tokens")
        .or_else(|| num("/usage/reasoning_tokens"))
        .or(absent_reasoning_as_zero.then_some(0));
    Ok((
        content.to_string(),
        UsageStats {
            prompt_tokens: num("/usage/prompt_tokens"),
            completion_tokens: num("/usage/completion_tokens"),
            reasoning_tokens: reasoning,
            generation_ms: None,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_attempts: 5,
            initial_backoff_ms: 100,
            max_backoff_ms: 350,
        };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(200));
        assert_eq!(p.backoff(3), Duration::from_millis(350));
    }

    #[test]
    fn completion_parsing() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"{\"message\":\"hi\"}"}}],
            "usage":{"prompt_tokens":10,"completion_tokens":5,"completion_tokens_details":{"reasoning_tokens":3}}}"#;
        let (raw, usage) = parse_completion(body, false).unwrap();
        assert_eq!(raw, r#"{"message":"hi"}"#);
        assert_eq!(usage.prompt_tokens, Some(10));
        assert_eq!(usage.reasoning_tokens, Some(3));

        let body = r#"{"choices":[{"message":{"content":"x"}}],"usage":{"prompt_tokens":1}}"#;
        assert_eq!(parse_completion(body, false).unwrap().1.reasoning_tokens, None);
        assert_eq!(parse_completion(body, true).unwrap().1.reasoning_tokens, Some(0));
        assert!(parse_completion("{}", false).is_err());
    }

    #[test]
    fn body_merges_passthrough() {
        let mut spec = RemoteSpec {
            base_url: "http://h/v1/".into(),
            model: "m".into(),
            api_key_env: "K".into(),
            reasoning: Map::new(),
            sampling: Map::new(),
            headers: Default::default(),
            retry: RetryPolicy::default(),
            timeout_secs: 5,
            absent_reasoning_as_zero: false,
        };
        spec.reasoning.insert("reasoning_effort".into(), json!("medium"));
        assert_eq!(spec.endpoint(), "http://h/v1/chat/completions");
        let ctx = super::super::build_turn_context("S", &[], "hr", "");
        let body = spec.request_body(&ctx);
        assert_eq!(body["model"], "m");
        assert_eq!(body["reasoning_effort"], "medium");
        assert_eq!(body["messages"][0]["role"], "system");
        assert!(body.get("temperature").is_none());
    }

    #[test]
    fn limiter_paces_requests() {
        let l = RateLimiter::new(50.0, 1);
        let start = Instant::now();
        for _ in 0..4 {
            l.acquire();
        }
        // first token is free, three more at 20 ms each
        assert!(start.elapsed() >= Duration::from_millis(55), "{:?}", start.elapsed());
    }
}
