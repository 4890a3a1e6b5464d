//! Text-generation backends shared by both planning agents.
//!
//! Two kinds are supported: a remote chat-completion endpoint (retries with
//! exponential backoff, no jitter) and the deterministic template backend
//! in [`template`], used offline and in tests.

pub mod block;
pub mod template;

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use template::{template_complete, TemplateGrammar};

/// Environment variable holding the bearer token for the remote endpoint.
pub const API_KEY_ENV: &str = "EMOSTORY_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, last_status: Option<u16>, message: String },
    #[error("backend rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("template error: {0}")]
    Template(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Template,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Http => "http",
            BackendKind::Template => "template",
        })
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(BackendKind::Http),
            "template" => Ok(BackendKind::Template),
            other => Err(format!("unknown backend `{other}` (expected http or template)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.7,
            max_tokens: 512,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompts must be non-empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_id: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    /// Process-wide cap on concurrent remote requests.
    pub max_in_flight: usize,
    #[serde(skip)]
    pub grammar: Option<TemplateGrammar>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::template()
    }
}

impl BackendConfig {
    pub fn template() -> Self {
        Self {
            kind: BackendKind::Template,
            endpoint_url: None,
            model_id: None,
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_base_ms: 500,
            max_in_flight: 4,
            grammar: None,
        }
    }

    pub fn http(endpoint_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint_url: Some(endpoint_url.into()),
            model_id: Some(model_id.into()),
            ..Self::template()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.kind == BackendKind::Http {
            if self.endpoint_url.as_deref().is_none_or(str::is_empty) {
                return Err(BackendError::InvalidConfig("http backend requires endpoint_url".into()));
            }
            if self.model_id.as_deref().is_none_or(str::is_empty) {
                return Err(BackendError::InvalidConfig("http backend requires model_id".into()));
            }
        }
        if self.timeout_ms == 0 {
            return Err(BackendError::InvalidConfig("timeout_ms must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::InvalidConfig("max_in_flight must be positive".into()));
        }
        Ok(())
    }

    pub fn model_label(&self) -> &str {
        match self.kind {
            BackendKind::Http => self.model_id.as_deref().unwrap_or(""),
            BackendKind::Template => "template",
        }
    }

    /// Delay before retry number `retry` (0-based): `backoff_base * 2^retry`.
    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << retry.min(32)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend_kind: BackendKind,
    pub latency_ms: u64,
    /// Number of requests issued, including the successful one.
    pub attempts: u32,
}

/// Sends `request` to the configured backend.
pub fn complete(request: &ChatRequest, config: &BackendConfig) -> Result<ChatResponse, BackendError> {
    config.validate()?;
    request.validate()?;
    match config.kind {
        BackendKind::Template => {
            let default_grammar;
            let grammar = match &config.grammar {
                Some(g) => g,
                None => {
                    default_grammar = TemplateGrammar::default();
                    &default_grammar
                }
            };
            template_complete(request, grammar, request.seed.unwrap_or(0))
        }
        BackendKind::Http => {
            let _permit = InFlight::acquire(config.max_in_flight);
            http_complete(request, config)
        }
    }
}

// ---------------------------------------------------------------------------
// Remote endpoint
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 2],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireContent,
}

#[derive(Deserialize)]
struct WireContent {
    content: Option<String>,
}

enum Attempt {
    Done(String),
    Transient { status: Option<u16>, message: String },
    Fatal(BackendError),
}

fn http_complete(request: &ChatRequest, config: &BackendConfig) -> Result<ChatResponse, BackendError> {
    let started = Instant::now();
    let url = config.endpoint_url.as_deref().unwrap_or_default();
    let body = WireRequest {
        model: config.model_id.as_deref().unwrap_or_default(),
        messages: [
            WireMessage { role: "system", content: &request.system_prompt },
            WireMessage { role: "user", content: &request.user_prompt },
        ],
        temperature: request.temperature,
        max_tokens: request.max_tokens,
        seed: request.seed,
    };
    let timeout = Duration::from_millis(config.timeout_ms);
    let client = reqwest::blocking::Client::builder()
        .timeout(timeout)
        .connect_timeout(timeout)
        .build()
        .map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
    let token = std::env::var(API_KEY_ENV).ok().filter(|t| !t.is_empty());

    let mut last_status = None;
    let mut last_message = String::new();
    for attempt in 0..=config.max_retries {
        if attempt > 0 {
            let delay = config.backoff(attempt - 1);
            log::warn!(
                "chat completion attempt {attempt} failed ({last_message}); retrying in {} ms",
                delay.as_millis()
            );
            thread::sleep(delay);
        }
        let mut builder = client.post(url).json(&body);
        if let Some(token) = &token {
            builder = builder.bearer_auth(token);
        }
        let outcome = match builder.send() {
            Err(e) => Attempt::Transient { status: None, message: e.to_string() },
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    match resp.json::<WireResponse>() {
                        Ok(parsed) => match parsed.choices.into_iter().next().and_then(|c| c.message.content) {
                            Some(text) if !text.trim().is_empty() => Attempt::Done(text),
                            _ => Attempt::Fatal(BackendError::Protocol("response carries no completion text".into())),
                        },
                        Err(e) if e.is_timeout() => Attempt::Transient { status: None, message: e.to_string() },
                        Err(e) => Attempt::Fatal(BackendError::Protocol(format!("malformed response body: {e}"))),
                    }
                } else if status.as_u16() == 429 || status.is_server_error() {
                    Attempt::Transient { status: Some(status.as_u16()), message: format!("status {status}") }
                } else {
                    let body = resp.text().unwrap_or_default();
                    Attempt::Fatal(BackendError::Rejected { status: status.as_u16(), body })
                }
            }
        };
        match outcome {
            Attempt::Done(text) => {
                log::debug!("chat completion succeeded after {} attempt(s)", attempt + 1);
                return Ok(ChatResponse {
                    text,
                    backend_kind: BackendKind::Http,
                    latency_ms: started.elapsed().as_millis() as u64,
                    attempts: attempt + 1,
                });
            }
            Attempt::Fatal(err) => return Err(err),
            Attempt::Transient { status, message } => {
                last_status = status;
                last_message = message;
            }
        }
    }
    Err(BackendError::Unavailable { attempts: config.max_retries + 1, last_status, message: last_message })
}

// ---------------------------------------------------------------------------
// Process-wide in-flight limit
// ---------------------------------------------------------------------------

static IN_FLIGHT: Mutex<usize> = Mutex::new(0);
static IN_FLIGHT_FREED: Condvar = Condvar::new();

struct InFlight;

impl InFlight {
    fn acquire(limit: usize) -> Self {
        let mut count = IN_FLIGHT.lock().unwrap_or_else(|p| p.into_inner());
        while *count >= limit {
            count = IN_FLIGHT_FREED.wait(count).unwrap_or_else(|p| p.into_inner());
        }
        *count += 1;
        InFlight
    }
}

impl Drop for InFlight {
    fn drop(&mut self) {
        let mut count = IN_FLIGHT.lock().unwrap_or_else(|p| p.into_inner());
        *count -= 1;
        IN_FLIGHT_FREED.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        assert!(ChatRequest::new("", "u").validate().is_err());
        let mut r = ChatRequest::new("s", "u");
        r.temperature = 2.5;
        assert!(r.validate().is_err());
        r.temperature = 2.0;
        assert!(r.validate().is_ok());
    }

    #[test]
    fn http_config_requires_endpoint_and_model() {
        let mut c = BackendConfig::http("http://localhost:1", "m");
        assert!(c.validate().is_ok());
        c.model_id = None;
        assert!(matches!(c.validate(), Err(BackendError::InvalidConfig(_))));
        c = BackendConfig::http("", "m");
        assert!(c.validate().is_err());
    }

    #[test]
    fn backoff_doubles() {
        let mut c = BackendConfig::template();
        c.backoff_base_ms = 10;
        let ms: Vec<u128> = (0..4).map(|r| c.backoff(r).as_millis()).collect();
        assert_eq!(ms, [10, 20, 40, 80]);
    }

    #[test]
    fn wire_request_shape() {
        let body = WireRequest {
            model: "m",
            messages: [WireMessage { role: "system", content: "s" }, WireMessage { role: "user", content: "u" }],
            temperature: 0.5,
            max_tokens: 9,
            seed: Some(3),
        };
        let v = serde_json::to_value(&body).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "model": "m",
                "messages": [{"role": "system", "content": "s"}, {"role": "user", "content": "u"}],
                "temperature": 0.5,
                "max_tokens": 9,
                "seed": 3
            })
        );
    }
}
