//! HTTP chat clients for the two supported endpoint shapes.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, ChatResponse, ProviderError, Role, TokenUsage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Connect(String),
}

/// Minimal POST-JSON transport so clients can be exercised without a network.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpResponse, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        Self::with_timeout(Duration::from_secs(300))
    }

    pub fn with_timeout(timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client builds");
        Self { client }
    }
}

impl Default for ReqwestTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpResponse, TransportError> {
        let mut req = self.client.post(url).json(body);
        for (k, v) in headers {
            req = req.header(k, v);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        Ok(HttpResponse { status, body })
    }
}

/// Exponential backoff with jitter. Defaults: 5 attempts, first wait 1 s.
#[derive(Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    pub jitter: bool,
    sleeper: Arc<dyn Fn(Duration) + Send + Sync>,
}

impl std::fmt::Debug for RetryPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetryPolicy")
            .field("max_attempts", &self.max_attempts)
            .field("initial_backoff", &self.initial_backoff)
            .field("max_backoff", &self.max_backoff)
            .field("jitter", &self.jitter)
            .finish()
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_backoff: Duration::from_secs(1),
            max_backoff: Duration::from_secs(60),
            jitter: true,
            sleeper: Arc::new(std::thread::sleep),
        }
    }
}

impl RetryPolicy {
    /// Same attempt limit, but waits are handed to `sleeper` instead of
    /// blocking the thread.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        let base = self
            .initial_backoff
            .saturating_mul(2u32.saturating_pow(retry))
            .min(self.max_backoff);
        if self.jitter && !base.is_zero() {
            let factor = rand::thread_rng().gen_range(0.5..1.0);
            base.mul_f64(factor)
        } else {
            base
        }
    }
}

enum Failure {
    Transient(ProviderError),
    Fatal(ProviderError),
}

fn classify(status: u16, body: &str, attempts: u32) -> Failure {
    let snippet: String = body.chars().take(200).collect();
    match status {
        401 | 403 => Failure::Fatal(ProviderError::Auth(format!("HTTP {status}: {snippet}"))),
        429 => Failure::Transient(ProviderError::RateLimited { attempts }),
        408 | 504 => Failure::Transient(ProviderError::Timeout { attempts }),
        500..=599 => Failure::Transient(ProviderError::Timeout { attempts }),
        _ => Failure::Fatal(ProviderError::MalformedResponse(format!(
            "HTTP {status}: {snippet}"
        ))),
    }
}

/// Posts with retries and hands the successful body to `parse`.
fn post_with_retry(
    transport: &dyn HttpTransport,
    retry: &RetryPolicy,
    url: &str,
    headers: &[(String, String)],
    body: &Value,
    parse: impl Fn(&Value) -> Result<ChatResponse, ProviderError>,
) -> Result<ChatResponse, ProviderError> {
    let started = Instant::now();
    let mut attempt = 0;
    loop {
        attempt += 1;
        let failure = match transport.post_json(url, headers, body) {
            Ok(resp) if (200..300).contains(&resp.status) => {
                let value: Value = serde_json::from_str(&resp.body)
                    .map_err(|e| ProviderError::MalformedResponse(e.to_string()))?;
                let mut out = parse(&value)?;
                out.latency_ms = started.elapsed().as_millis() as u64;
                out.attempts = attempt;
                return Ok(out);
            }
            Ok(resp) => classify(resp.status, &resp.body, attempt),
            Err(TransportError::Timeout) => {
                Failure::Transient(ProviderError::Timeout { attempts: attempt })
            }
            Err(TransportError::Connect(_)) => {
                Failure::Transient(ProviderError::Timeout { attempts: attempt })
            }
        };
        match failure {
            Failure::Fatal(e) => return Err(e),
            Failure::Transient(e) if attempt >= retry.max_attempts => return Err(e),
            Failure::Transient(_) => (retry.sleeper)(retry.backoff(attempt - 1)),
        }
    }
}

fn usage_field(v: &Value, key: &str) -> u64 {
    v.get(key).and_then(Value::as_u64).unwrap_or(0)
}

/// Client for OpenAI-compatible `/chat/completions` endpoints.
pub struct OpenAiClient {
    transport: Arc<dyn HttpTransport>,
    api_key: String,
    model: String,
    base_url: String,
    reasoning_effort: Option<String>,
    retry: RetryPolicy,
}

impl OpenAiClient {
    pub fn new(
        transport: Arc<dyn HttpTransport>,
        api_key: impl Into<String>,
        model: impl Into<String>,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            transport,
            api_key: api_key.into(),
            model: model.into(),
            base_url: "https://api.openai.com/v1".into(),
            reasoning_effort: None,
            retry,
        }
    }

    pub fn with_base_url(mut self, url: impl Into<String>) -> Self {
        self.base_url = url.into().trim_end_matches('/').to_string();
        self
    }

    pub fn with_reasoning_effort(mut self, effort: Option<String>) -> Self {
        self.reasoning_effort = effort;
        self
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| json!({"role": m.role, "content": m.content}))
            .collect();
        let mut body = json!({"model": self.model, "messages": messages});
        // Reasoning models reject sampling temperature.
        match &self.reasoning_effort {
            Some(effort) => body["reasoning_effort"] = json!(effort),
            None => body["temperature"] = json!(request.temperature),
        }
        if let Some(max) = request.max_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }

    fn parse(value: &Value) -> Result<ChatResponse, ProviderError> {
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| ProviderError::MalformedResponse("missing choices[0]".into()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::MalformedResponse("missing message.content".into()))?;
        let usage = value.get("usage").cloned().unwrap_or(Value::Null);
        Ok(ChatResponse {
            text: text.to_string(),
            finish_reason: choice
                .get("finish_reason")
                .and_then(Value::as_str)
                .unwrap_or("unknown")
                .to_string(),
            token_usage: TokenUsage {
                prompt_tokens: usage_field(&usage, "prompt_tokens"),
                completion_tokens: usage_field(&usage, "completion_tokens"),
            },
            latency_ms: 0,
            attempts: 1,
        })
    }
}

impl ChatBackend for OpenAiClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let url = format!("{}/chat/completions", self.base_url);
        let headers = vec![(
            "Authorization".to_string(),
            format!("Bearer {}", self.api_key),
        )];
        post_with_retry(
            self.transport.as_ref(),
            &self.retry,
            &url,
            &headers,
            &self.request_body(request),
            Self::parse,
        )
    }

    fn describe(&self) -> String {
        format!("openai-compatible:{}", self.base_url)
    }
}

/// Client for Anthropic-style `/v1/messages` endpoints.
pub struct AnthropicClient {
    transport: Arc<dyn HttpTransport>,
    api_key: String,
    model: String,
    base_url: String,
    reasoning_effort: Option<String>,
    retry: RetryPolicy,
}

const ANTHROPIC_VERSION: &str = "2023-06-01";
const DEFAULT_MAX_TOKENS: u32 = 4096;

impl AnthropicClient {
    pub fn new(
        transport: Arc<dyn HttpTransport>,
        api_key: impl Into<String>,
        model: impl Into<String>,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            transport,
            api_key: api_key.into(),
            model: model.into(),
            base_url: "https://api.anthropic.com".into(),
            reasoning_effort: None,
            retry,
        }
    }

    pub fn with_base_url(mut self, url: impl Into<String>) -> Self {
        self.base_url = url.into().trim_end_matches('/').to_string();
        self
    }

    pub fn with_reasoning_effort(mut self, effort: Option<String>) -> Self {
        self.reasoning_effort = effort;
        self
    }

    fn thinking_budget(effort: &str) -> u32 {
        match effort {
            "low" => 2048,
            "high" => 16384,
            _ => 8192,
        }
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let system: Vec<&str> = request
            .messages
            .iter()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .collect();
        let messages: Vec<Value> = request
            .messages
            .iter()
            .filter(|m| m.role != Role::System)
            .map(|m| json!({"role": m.role, "content": m.content}))
            .collect();
        let max_tokens = request.max_tokens.unwrap_or(DEFAULT_MAX_TOKENS);
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "max_tokens": max_tokens,
        });
        if !system.is_empty() {
            body["system"] = json!(system.join("\n\n"));
        }
        match &self.reasoning_effort {
            Some(effort) => {
                let budget = Self::thinking_budget(effort);
                body["thinking"] = json!({"type": "enabled", "budget_tokens": budget});
                body["max_tokens"] = json!(budget + max_tokens);
            }
            None => body["temperature"] = json!(request.temperature),
        }
        body
    }

    fn parse(value: &Value) -> Result<ChatResponse, ProviderError> {
        let blocks = value
            .get("content")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::MalformedResponse("missing content array".into()))?;
        let text: Vec<&str> = blocks
            .iter()
            .filter(|b| b.get("type").and_then(Value::as_str) == Some("text"))
            .filter_map(|b| b.get("text").and_then(Value::as_str))
            .collect();
        if text.is_empty() {
            return Err(ProviderError::MalformedResponse("no text block".into()));
        }
        let usage = value.get("usage").cloned().unwrap_or(Value::Null);
        Ok(ChatResponse {
            text: text.join("\n"),
            finish_reason: value
                .get("stop_reason")
                .and_then(Value::as_str)
                .unwrap_or("unknown")
                .to_string(),
            token_usage: TokenUsage {
                prompt_tokens: usage_field(&usage, "input_tokens"),
                completion_tokens: usage_field(&usage, "output_tokens"),
            },
            latency_ms: 0,
            attempts: 1,
        })
    }
}

impl ChatBackend for AnthropicClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let url = format!("{}/v1/messages", self.base_url);
        let headers = vec![
            ("x-api-key".to_string(), self.api_key.clone()),
            (
                "anthropic-version".to_string(),
                ANTHROPIC_VERSION.to_string(),
            ),
        ];
        post_with_retry(
            self.transport.as_ref(),
            &self.retry,
            &url,
            &headers,
            &self.request_body(request),
            Self::parse,
        )
    }

    fn describe(&self) -> String {
        format!("anthropic:{}", self.base_url)
    }
}
