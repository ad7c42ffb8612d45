//! Client for OpenAI-compatible chat-completion endpoints.
//!
//! Each [`EndpointClient`] bounds in-flight requests with a semaphore, spaces
//! requests with a per-endpoint rate limiter and retries transient failures
//! (HTTP 429, 5xx, timeouts, connection errors) with exponential backoff.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, Semaphore};
use tokio::time::Instant;

use crate::corpus::PreprocessedRecord;
use crate::error::{Error, Result};
use crate::options::OptionPermutation;
use crate::prompt::{self, PromptTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    #[serde(default = "RetryPolicy::default_base_delay_ms")]
    pub base_delay_ms: u64,
    #[serde(default = "RetryPolicy::default_factor")]
    pub factor: u32,
    #[serde(default = "RetryPolicy::default_max_attempts")]
    pub max_attempts: u32,
}

impl RetryPolicy {
    fn default_base_delay_ms() -> u64 {
        1000
    }
    fn default_factor() -> u32 {
        2
    }
    fn default_max_attempts() -> u32 {
        5
    }

    /// Delay after the given failed attempt (1-based).
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let mult = (self.factor as u64).saturating_pow(attempt.saturating_sub(1));
        Duration::from_millis(self.base_delay_ms.saturating_mul(mult))
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay_ms: Self::default_base_delay_ms(),
            factor: Self::default_factor(),
            max_attempts: Self::default_max_attempts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatEndpoint {
    pub name: String,
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_ref: String,
    pub model_id: String,
    pub max_in_flight: u32,
    pub requests_per_minute: u32,
    pub timeout_seconds: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl ChatEndpoint {
    pub fn validate(&self) -> Result<()> {
        let url = url::Url::parse(&self.base_url)
            .map_err(|e| Error::Config(format!("endpoint {}: base_url: {e}", self.name)))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(Error::Config(format!(
                "endpoint {}: base_url must be http(s), got {}",
                self.name,
                url.scheme()
            )));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config(format!("endpoint {}: max_in_flight must be >= 1", self.name)));
        }
        if self.requests_per_minute == 0 {
            return Err(Error::Config(format!(
                "endpoint {}: requests_per_minute must be >= 1",
                self.name
            )));
        }
        if self.retry.max_attempts == 0 {
            return Err(Error::Config(format!("endpoint {}: retry.max_attempts must be >= 1", self.name)));
        }
        Ok(())
    }

    fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    #[serde(default)]
    pub system: String,
    pub user: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "CompletionRequest::default_max_tokens")]
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub const EVAL_MAX_TOKENS: u32 = 32;

    fn default_max_tokens() -> u32 {
        Self::EVAL_MAX_TOKENS
    }

    /// Temperature 0, 32 tokens.
    pub fn eval(user: impl Into<String>) -> Self {
        Self {
            system: String::new(),
            user: user.into(),
            temperature: 0.0,
            max_tokens: Self::EVAL_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub latency_ms: u64,
    pub attempts: u32,
}

/// Wire types for `POST {base_url}/chat/completions`.
pub mod wire {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ChatMessage {
        pub role: String,
        pub content: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ChatRequest {
        pub model: String,
        pub messages: Vec<ChatMessage>,
        pub temperature: f64,
        pub max_tokens: u32,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ChatResponse {
        pub choices: Vec<Choice>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct Choice {
        pub message: ChatMessage,
    }

    impl ChatRequest {
        /// Content of the last user message.
        pub fn user_content(&self) -> &str {
            self.messages
                .iter()
                .rev()
                .find(|m| m.role == "user")
                .map(|m| m.content.as_str())
                .unwrap_or("")
        }
    }

    impl ChatResponse {
        pub fn assistant(text: impl Into<String>) -> Self {
            Self {
                choices: vec![Choice {
                    message: ChatMessage {
                        role: "assistant".into(),
                        content: text.into(),
                    },
                }],
            }
        }
    }
}

/// Admits at most `limit` acquisitions in any sliding `window`.
#[derive(Debug)]
pub struct RateLimiter {
    limit: usize,
    window: Duration,
    issued: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn per_minute(limit: u32) -> Self {
        Self::new(limit as usize, Duration::from_secs(60))
    }

    pub fn new(limit: usize, window: Duration) -> Self {
        Self {
            limit: limit.max(1),
            window,
            issued: Mutex::new(VecDeque::new()),
        }
    }

    /// Waits until a slot is free, then records the acquisition.
    pub async fn acquire(&self) {
        loop {
            let wait_until = {
                let mut issued = self.issued.lock().await;
                let now = Instant::now();
                while issued.front().is_some_and(|t| now.duration_since(*t) >= self.window) {
                    issued.pop_front();
                }
                if issued.len() < self.limit {
                    issued.push_back(now);
                    return;
                }
                issued[0] + self.window
            };
            tokio::time::sleep_until(wait_until).await;
        }
    }
}

#[derive(Debug)]
pub struct EndpointClient {
    endpoint: ChatEndpoint,
    http: reqwest::Client,
    in_flight: Semaphore,
    limiter: RateLimiter,
}

enum Attempt {
    Done(String),
    Retry { status: Option<u16>, message: String },
    Fatal { status: Option<u16>, message: String },
}

impl EndpointClient {
    pub fn new(endpoint: ChatEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_seconds.max(1)))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            in_flight: Semaphore::new(endpoint.max_in_flight as usize),
            limiter: RateLimiter::per_minute(endpoint.requests_per_minute),
            endpoint,
            http,
        })
    }

    pub fn endpoint(&self) -> &ChatEndpoint {
        &self.endpoint
    }

    pub async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        let key = std::env::var(&self.endpoint.api_key_ref).map_err(|_| {
            Error::Config(format!(
                "endpoint {}: environment variable {} is not set",
                self.endpoint.name, self.endpoint.api_key_ref
            ))
        })?;

        let mut messages = Vec::with_capacity(2);
        if !request.system.is_empty() {
            messages.push(wire::ChatMessage {
                role: "system".into(),
                content: request.system.clone(),
            });
        }
        messages.push(wire::ChatMessage {
            role: "user".into(),
            content: request.user.clone(),
        });
        let body = wire::ChatRequest {
            model: self.endpoint.model_id.clone(),
            messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };

        let policy = self.endpoint.retry;
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 1..=policy.max_attempts {
            let started = Instant::now();
            match self.attempt(&key, &body).await {
                Attempt::Done(text) => {
                    return Ok(CompletionResult {
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempts: attempt,
                    })
                }
                Attempt::Fatal { status, message } => {
                    return Err(Error::Transport {
                        message,
                        status,
                        attempts: attempt,
                    })
                }
                Attempt::Retry { status, message } => {
                    tracing::debug!(endpoint = %self.endpoint.name, attempt, ?status, "retryable failure: {message}");
                    last_status = status.or(last_status);
                    last_message = message;
                }
            }
            if attempt < policy.max_attempts {
                tokio::time::sleep(policy.delay_after(attempt)).await;
            }
        }
        Err(Error::Transport {
            message: last_message,
            status: last_status,
            attempts: policy.max_attempts,
        })
    }

    async fn attempt(&self, key: &str, body: &wire::ChatRequest) -> Attempt {
        self.limiter.acquire().await;
        let _permit = self.in_flight.acquire().await.expect("semaphore never closed");
        let resp = match self
            .http
            .post(self.endpoint.completions_url())
            .bearer_auth(key)
            .json(body)
            .send()
            .await
        {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry {
                    status: None,
                    message: e.to_string(),
                }
            }
        };
        let status = resp.status();
        if status.is_success() {
            return match resp.json::<wire::ChatResponse>().await {
                Ok(parsed) => match parsed.choices.into_iter().next() {
                    Some(choice) => Attempt::Done(choice.message.content),
                    None => Attempt::Fatal {
                        status: Some(status.as_u16()),
                        message: "response has no choices".into(),
                    },
                },
                Err(e) if e.is_timeout() => Attempt::Retry {
                    status: None,
                    message: e.to_string(),
                },
                Err(e) => Attempt::Fatal {
                    status: Some(status.as_u16()),
                    message: format!("malformed response body: {e}"),
                },
            };
        }
        let text = resp.text().await.unwrap_or_default();
        let message = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
        if status.as_u16() == 429 || status.is_server_error() {
            Attempt::Retry {
                status: Some(status.as_u16()),
                message,
            }
        } else {
            Attempt::Fatal {
                status: Some(status.as_u16()),
                message,
            }
        }
    }
}

/// Named endpoint clients sharing nothing but the process.
#[derive(Debug, Clone, Default)]
pub struct Gateway {
    clients: BTreeMap<String, Arc<EndpointClient>>,
}

impl Gateway {
    pub fn new(endpoints: &[ChatEndpoint]) -> Result<Self> {
        let mut clients = BTreeMap::new();
        for ep in endpoints {
            if clients
                .insert(ep.name.clone(), Arc::new(EndpointClient::new(ep.clone())?))
                .is_some()
            {
                return Err(Error::Config(format!("duplicate endpoint name {}", ep.name)));
            }
        }
        Ok(Self { clients })
    }

    pub fn client(&self, name: &str) -> Result<Arc<EndpointClient>> {
        self.clients
            .get(name)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("endpoint {name}")))
    }
}

/// First integer token in `0..=10`, if any.
pub fn parse_score(reply: &str) -> Option<u8> {
    reply
        .split(|c: char| !c.is_ascii_digit())
        .filter(|tok| !tok.is_empty())
        .filter_map(|tok| tok.parse::<u32>().ok())
        .find(|n| *n <= 10)
        .map(|n| n as u8)
}

/// Ask a scoring endpoint how likely `record` is a help-seeking question.
pub async fn score_question(client: &EndpointClient, record: &PreprocessedRecord) -> Result<u8> {
    if record.text.trim().is_empty() {
        return Err(Error::Validation(format!("record {} has empty text", record.id)));
    }
    let reply = client
        .complete(&CompletionRequest::eval(prompt::render_scoring_prompt(record)))
        .await?;
    parse_score(&reply.text).ok_or(Error::ScoringParse(reply.text))
}

/// Render the resolution prompt for `record` and return the raw reply.
pub async fn resolve_query(
    client: &EndpointClient,
    template: &str,
    record: &PreprocessedRecord,
    options: &OptionPermutation,
) -> Result<String> {
    let template = PromptTemplate::parse(template)?;
    let reply = client
        .complete(&CompletionRequest::eval(template.render(record, options)))
        .await?;
    Ok(reply.text)
}
