//! Chat-completion backend over HTTP.
//!
//! Speaks the common `POST {base_url}/chat/completions` protocol with a
//! bearer credential. Transport errors, 408 and 5xx answers are retried with
//! exponential backoff; 429 is retried the same way but honours
//! `Retry-After`. 401 and 403 fail at once.

use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use agp_core::gateway::{ChatBackend, ChatRequest, ChatResponse, GatewayError, Usage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const API_KEY_ENV: &str = "AGP_API_KEY";
pub const BASE_URL_ENV: &str = "AGP_BASE_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: Option<String>,
    pub model: String,
    /// Environment variable holding the bearer credential.
    pub api_key_env: String,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    /// Zero disables the limiter.
    pub requests_per_minute: u32,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: None,
            model: "gpt-4o".into(),
            api_key_env: API_KEY_ENV.into(),
            max_retries: 5,
            initial_backoff_ms: 500,
            max_backoff_ms: 30_000,
            requests_per_minute: 0,
            timeout_secs: 120,
        }
    }
}

/// One HTTP exchange as seen by the backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
    pub retry_after: Option<Duration>,
}

/// Sends a JSON body. `Err` is a transport failure (no HTTP status).
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, bearer: &str, body: &str, timeout: Duration) -> Result<HttpReply, String>;
}

/// The real transport.
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, String> {
        reqwest::blocking::Client::builder()
            .build()
            .map(|client| ReqwestTransport { client })
            .map_err(|e| e.to_string())
    }
}

impl Transport for ReqwestTransport {
    fn post_json(&self, url: &str, bearer: &str, body: &str, timeout: Duration) -> Result<HttpReply, String> {
        let resp = self
            .client
            .post(url)
            .bearer_auth(bearer)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .timeout(timeout)
            .body(body.to_owned())
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpReply {
            status,
            body,
            retry_after,
        })
    }
}

/// Spaces request starts at least `60s / rpm` apart.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn per_minute(rpm: u32) -> Option<Self> {
        (rpm > 0).then(|| RateLimiter {
            interval: Duration::from_secs(60) / rpm,
            next: Mutex::new(None),
        })
    }

    /// How long the caller must wait; reserves the slot.
    fn reserve(&self, now: Instant) -> Duration {
        let mut next = self.next.lock().expect("rate limiter lock");
        let start = next.map_or(now, |n| n.max(now));
        *next = Some(start + self.interval);
        start - now
    }
}

type Sleep = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct HttpBackend<T> {
    transport: T,
    url: String,
    api_key: String,
    config: HttpConfig,
    limiter: Option<RateLimiter>,
    sleep: Sleep,
}

impl<T> fmt::Debug for HttpBackend<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("url", &self.url)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HttpSetupError {
    #[error("no base URL: set http.base_url or {BASE_URL_ENV}")]
    MissingBaseUrl,
    #[error("credential variable {0} is not set")]
    MissingCredential(String),
    #[error("cannot build HTTP client: {0}")]
    Client(String),
}

impl<T: Transport> HttpBackend<T> {
    /// `base_url` must already be resolved (config, flag or environment).
    pub fn new(transport: T, base_url: &str, api_key: String, config: HttpConfig) -> Self {
        HttpBackend {
            transport,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            limiter: RateLimiter::per_minute(config.requests_per_minute),
            config,
            sleep: Arc::new(std::thread::sleep),
        }
    }

    /// Replaces the sleep used for backoff and rate limiting.
    pub fn with_sleep(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn body(&self, request: &ChatRequest) -> String {
        json!({
            "model": self.config.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
        .to_string()
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .config
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.config.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

pub fn parse_reply(body: &str) -> Result<(String, Option<Usage>), GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::MalformedResponse("no choices[0].message.content".into()))?;
    let usage = v.get("usage").and_then(|u| {
        Some(Usage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok((text.to_string(), usage))
}

fn snippet(body: &str) -> String {
    body.chars().take(200).collect()
}

impl<T: Transport> ChatBackend for HttpBackend<T> {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let body = self.body(request);
        let timeout = Duration::from_secs(self.config.timeout_secs);
        let attempts = self.config.max_retries + 1;
        let mut last_error = String::new();
        let mut rate_limited = false;
        for attempt in 0..attempts {
            if let Some(limiter) = &self.limiter {
                let wait = limiter.reserve(Instant::now());
                if !wait.is_zero() {
                    (self.sleep)(wait);
                }
            }
            let started = Instant::now();
            let mut delay = self.backoff(attempt);
            match self.transport.post_json(&self.url, &self.api_key, &body, timeout) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let (text, usage) = parse_reply(&reply.body)?;
                    return Ok(ChatResponse {
                        text,
                        usage,
                        latency: started.elapsed(),
                    });
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(GatewayError::Auth(format!("HTTP {}: {}", reply.status, snippet(&reply.body))));
                }
                Ok(reply) if reply.status == 429 => {
                    rate_limited = true;
                    if let Some(ra) = reply.retry_after {
                        delay = ra.min(Duration::from_millis(self.config.max_backoff_ms));
                    }
                    last_error = format!("HTTP 429: {}", snippet(&reply.body));
                }
                Ok(reply) if reply.status == 408 || reply.status >= 500 => {
                    rate_limited = false;
                    last_error = format!("HTTP {}: {}", reply.status, snippet(&reply.body));
                }
                Ok(reply) => {
                    return Err(GatewayError::Backend(format!("HTTP {}: {}", reply.status, snippet(&reply.body))));
                }
                Err(e) => {
                    rate_limited = false;
                    last_error = e;
                }
            }
            log::warn!(
                "{} call failed (attempt {}/{attempts}): {last_error}",
                request.purpose,
                attempt + 1
            );
            if attempt + 1 < attempts {
                (self.sleep)(delay);
            }
        }
        if rate_limited {
            Err(GatewayError::RateLimitExhausted { attempts })
        } else {
            Err(GatewayError::Transport {
                attempts,
                message: last_error,
            })
        }
    }
}

/// Resolves the base URL (flag, then environment, then config) and reads the
/// credential from the environment.
pub fn from_env(config: &HttpConfig, base_url_flag: Option<&str>) -> Result<HttpBackend<ReqwestTransport>, HttpSetupError> {
    let env_url = std::env::var(BASE_URL_ENV).ok().filter(|s| !s.is_empty());
    let base_url = base_url_flag
        .map(str::to_string)
        .or(env_url)
        .or_else(|| config.base_url.clone())
        .ok_or(HttpSetupError::MissingBaseUrl)?;
    let key = std::env::var(&config.api_key_env)
        .ok()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| HttpSetupError::MissingCredential(config.api_key_env.clone()))?;
    let transport = ReqwestTransport::new().map_err(HttpSetupError::Client)?;
    Ok(HttpBackend::new(transport, &base_url, key, config.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn limiter_spaces_requests() {
        let l = RateLimiter::per_minute(60).unwrap();
        let t = Instant::now();
        assert_eq!(l.reserve(t), Duration::ZERO);
        assert_eq!(l.reserve(t), Duration::from_secs(1));
        assert_eq!(l.reserve(t), Duration::from_secs(2));
        assert!(RateLimiter::per_minute(0).is_none());
    }

    #[test]
    fn reply_parsing() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;
        let (text, usage) = parse_reply(body).unwrap();
        assert_eq!(text, "hi");
        assert_eq!(usage.unwrap().completion_tokens, 1);
        assert!(matches!(parse_reply("{}"), Err(GatewayError::MalformedResponse(_))));
        assert!(matches!(parse_reply("nope"), Err(GatewayError::MalformedResponse(_))));
    }
}
