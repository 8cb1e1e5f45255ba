//! Agent backends and the response cache.
//!
//! Every model call in the engine goes through [`Gateway::cached_complete`],
//! which consults the content-addressed cache before dispatching to a
//! [`ChatBackend`]. A run executed against a warm cache performs no backend
//! calls at all, which is what makes transcripts replayable.

mod cache;
mod http;
mod scripted;
mod simulated;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{AgentBackend, AgentProfile, Outcome};
use crate::prompting::PromptMode;

pub use cache::{CacheRecord, ResponseCache};
pub use http::{
    AnthropicClient, HttpResponse, HttpTransport, OpenAiClient, ReqwestTransport, RetryPolicy,
    TransportError,
};
pub use scripted::ScriptedBackend;
pub use simulated::{simulate_label, simulate_response, SimulatedBackend};

pub const OPENAI_KEY_VAR: &str = "ANNOFORGE_OPENAI_KEY";
pub const ANTHROPIC_KEY_VAR: &str = "ANNOFORGE_ANTHROPIC_KEY";
pub const GOOGLE_KEY_VAR: &str = "ANNOFORGE_GOOGLE_KEY";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("cache i/o: {0}")]
    CacheIo(String),
    #[error("no recorded response for key {0} (cache-only backend)")]
    ReplayMiss(String),
    #[error("backend cannot serve request: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Structured view of the annotation a request belongs to.
///
/// Real endpoints only see the messages; simulated and scripted backends
/// answer from this context instead of reading prose. It is never part of the
/// cache key since it is fully determined by what the messages encode.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnnotationContext {
    pub instance_id: String,
    pub gold: Option<String>,
    pub labels: Vec<String>,
    pub round: u32,
    pub mode: Option<PromptMode>,
    /// The agent's own outcome in the previous round.
    pub own_previous: Option<Outcome>,
    /// All agents' outcomes in the previous round, in group order.
    pub previous_round: Vec<Outcome>,
    /// All agents' round-0 outcomes, in group order.
    pub initial_pool: Vec<Outcome>,
    /// Set on the corrective re-issue after an unparseable answer.
    pub format_retry: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub sample_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(skip)]
    pub context: Option<AnnotationContext>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>, temperature: f64) -> Self {
        Self {
            messages,
            temperature,
            sample_index: 0,
            max_tokens: None,
            context: None,
        }
    }

    pub fn with_sample_index(mut self, sample_index: u32) -> Self {
        self.sample_index = sample_index;
        self
    }

    pub fn with_context(mut self, context: AnnotationContext) -> Self {
        self.context = Some(context);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: String,
    pub token_usage: TokenUsage,
    pub latency_ms: u64,
    /// Number of HTTP attempts it took to obtain this response.
    #[serde(default = "one")]
    pub attempts: u32,
}

fn one() -> u32 {
    1
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: "stop".into(),
            token_usage: TokenUsage::default(),
            latency_ms: 0,
            attempts: 1,
        }
    }
}

/// Stable digest of everything that determines a response: model identity,
/// the messages, temperature and sample index.
pub fn cache_key(model: &str, request: &ChatRequest) -> String {
    #[derive(Serialize)]
    struct KeyMaterial<'a> {
        model: &'a str,
        messages: &'a [ChatMessage],
        // Fixed-precision decimal so the digest never depends on float
        // formatting quirks.
        temperature: String,
        sample_index: u32,
    }
    let material = KeyMaterial {
        model,
        messages: &request.messages,
        temperature: format!("{:.6}", request.temperature),
        sample_index: request.sample_index,
    };
    let bytes = serde_json::to_vec(&material).expect("key material serializes");
    hex::encode(Sha256::digest(bytes))
}

/// A model endpoint or stand-in that can answer one chat request.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;

    /// Short label recorded in cache records.
    fn describe(&self) -> String;
}

/// Backend that refuses every call; used when replaying strictly from cache.
#[derive(Debug, Default)]
pub struct CacheOnlyBackend;

impl ChatBackend for CacheOnlyBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let id = request
            .context
            .as_ref()
            .map(|c| c.instance_id.clone())
            .unwrap_or_default();
        Err(ProviderError::ReplayMiss(format!("instance {id}")))
    }

    fn describe(&self) -> String {
        "cache-only".into()
    }
}

/// One configured agent bound to the backend that serves it.
#[derive(Clone)]
pub struct Agent {
    pub profile: AgentProfile,
    backend: Arc<dyn ChatBackend>,
    identity: String,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("profile", &self.profile)
            .field("backend", &self.backend.describe())
            .finish()
    }
}

impl Agent {
    pub fn new(profile: AgentProfile, backend: Arc<dyn ChatBackend>) -> Self {
        let identity = profile.model_identity();
        Self {
            profile,
            backend,
            identity,
        }
    }

    pub fn id(&self) -> &str {
        &self.profile.agent_id
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn backend(&self) -> &dyn ChatBackend {
        self.backend.as_ref()
    }
}

/// How an [`Agent`]'s backend gets constructed from its profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendMode {
    /// Real endpoints and simulators are both live.
    Live,
    /// Every backend is replaced by [`CacheOnlyBackend`].
    CacheOnly,
}

/// Builds the backend for a profile. Real endpoints read credentials from the
/// environment; a missing key is reported as [`ProviderError::Auth`].
pub fn build_backend(
    profile: &AgentProfile,
    mode: BackendMode,
    retry: RetryPolicy,
) -> Result<Arc<dyn ChatBackend>, ProviderError> {
    if mode == BackendMode::CacheOnly {
        return Ok(Arc::new(CacheOnlyBackend));
    }
    Ok(match &profile.backend {
        AgentBackend::Simulated(policy) => Arc::new(SimulatedBackend::new(policy.clone())),
        AgentBackend::Scripted => Arc::new(CacheOnlyBackend),
        AgentBackend::Real {
            endpoint,
            model,
            base_url,
        } => {
            use crate::domain::EndpointKind;
            let transport = Arc::new(ReqwestTransport::new());
            match endpoint {
                EndpointKind::OpenAi => {
                    let key = credential(OPENAI_KEY_VAR, base_url.as_deref())?;
                    let mut client = OpenAiClient::new(transport, key, model.clone(), retry);
                    if let Some(url) = base_url {
                        client = client.with_base_url(url.clone());
                    }
                    Arc::new(client.with_reasoning_effort(profile.reasoning_effort.clone()))
                }
                EndpointKind::Anthropic => {
                    let key = credential(ANTHROPIC_KEY_VAR, None)?;
                    let mut client = AnthropicClient::new(transport, key, model.clone(), retry);
                    if let Some(url) = base_url {
                        client = client.with_base_url(url.clone());
                    }
                    Arc::new(client.with_reasoning_effort(profile.reasoning_effort.clone()))
                }
            }
        }
    })
}

fn credential(var: &str, base_url: Option<&str>) -> Result<String, ProviderError> {
    // OpenAI-compatible Gemini endpoints authenticate with the Google key.
    let var = match base_url {
        Some(url) if url.contains("generativelanguage.googleapis.com") => GOOGLE_KEY_VAR,
        _ => var,
    };
    match std::env::var(var) {
        Ok(v) if !v.trim().is_empty() => Ok(v),
        _ => Err(ProviderError::Auth(format!("{var} is not set"))),
    }
}

/// Result of a cached completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub response: ChatResponse,
    pub hit: bool,
    pub key: String,
}

/// Routes requests through the cache and counts real backend invocations.
#[derive(Debug, Default)]
pub struct Gateway {
    cache: Option<ResponseCache>,
    backend_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(cache: Option<ResponseCache>) -> Self {
        Self {
            cache,
            backend_calls: AtomicUsize::new(0),
        }
    }

    pub fn uncached() -> Self {
        Self::new(None)
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    /// Number of requests that reached a backend (cache misses).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    /// Calls the agent's backend directly, bypassing the cache.
    pub fn complete(
        &self,
        agent: &Agent,
        request: &ChatRequest,
    ) -> Result<ChatResponse, ProviderError> {
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        agent.backend.complete(request)
    }

    pub fn cached_complete(
        &self,
        agent: &Agent,
        request: &ChatRequest,
    ) -> Result<Completion, ProviderError> {
        let key = cache_key(agent.identity(), request);
        if let Some(cache) = &self.cache {
            if let Some(record) = cache.get(&key)? {
                return Ok(Completion {
                    response: record.response,
                    hit: true,
                    key,
                });
            }
        }
        let response = self.complete(agent, request)?;
        let response = match &self.cache {
            // The first completed write is canonical; return what the store
            // holds so concurrent writers agree.
            Some(cache) => {
                cache.put(&key, agent.identity(), &agent.backend.describe(), request, &response)?
            }
            None => response,
        };
        Ok(Completion {
            response,
            hit: false,
            key,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SimulatedPolicy;

    fn req(t: f64, s: u32) -> ChatRequest {
        ChatRequest::new(vec![ChatMessage::user("label this")], t).with_sample_index(s)
    }

    #[test]
    fn key_depends_on_temperature_and_sample() {
        let k = cache_key("m", &req(0.0, 0));
        assert_eq!(k.len(), 64);
        assert_ne!(k, cache_key("m", &req(0.7, 0)));
        assert_ne!(k, cache_key("m", &req(0.0, 3)));
        assert_ne!(k, cache_key("other", &req(0.0, 0)));
        assert_eq!(k, cache_key("m", &req(0.0, 0)));
    }

    #[test]
    fn key_ignores_context() {
        let a = req(0.0, 0);
        let b = req(0.0, 0).with_context(AnnotationContext {
            instance_id: "x".into(),
            ..Default::default()
        });
        assert_eq!(cache_key("m", &a), cache_key("m", &b));
    }

    #[test]
    fn key_is_stable_across_runs() {
        // sha256 of {"model":"m","messages":[...],"temperature":"0.000000","sample_index":0}
        // computed outside Rust; any change invalidates every shipped cache.
        assert_eq!(
            cache_key("m", &req(0.0, 0)),
            "e16865307ada9fee2bf1b8166bd1be88e9720c0d8afc35dcad5274a3c5b7c0ab"
        );
    }

    #[test]
    fn missing_credentials_fail_fast() {
        std::env::remove_var(ANTHROPIC_KEY_VAR);
        let profile = AgentProfile::new(
            "c",
            AgentBackend::Real {
                endpoint: crate::domain::EndpointKind::Anthropic,
                model: "claude".into(),
                base_url: None,
            },
        );
        let result = build_backend(&profile, BackendMode::Live, RetryPolicy::default());
        assert!(matches!(result, Err(ProviderError::Auth(_))));
    }

    #[test]
    fn cache_only_mode_never_calls_simulator() {
        let profile = AgentProfile::simulated(
            "s",
            SimulatedPolicy {
                accuracy: 1.0,
                stubbornness: 0.0,
                follow_majority: 0.0,
                restrict_to_pool: false,
                seed: 0,
            },
        );
        let backend = build_backend(&profile, BackendMode::CacheOnly, RetryPolicy::default())
            .unwrap_or_else(|e| panic!("{e}"));
        let agent = Agent::new(profile, backend);
        let gw = Gateway::uncached();
        assert!(matches!(
            gw.cached_complete(&agent, &req(0.0, 0)),
            Err(ProviderError::ReplayMiss(_))
        ));
    }
}
