//! Uniform chat-completion access over configured providers.
//!
//! One `Gateway` serves a whole run: it owns the HTTP connection pool, the
//! run-level concurrency cap and the retry machinery. Each case worker opens
//! a [`GatewaySession`] so scripted models replay deterministically per case.

mod openai;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::config::{Message, ModelConfig, Provider, Sampling};

#[derive(Debug, Error, Clone)]
pub enum GatewayError {
    #[error("model '{model}': transport failure: {message}")]
    Transport { model: String, message: String },
    #[error("model '{model}': endpoint returned status {status}: {body}")]
    Status {
        model: String,
        status: u16,
        body: String,
    },
    #[error("model '{model}': malformed response body: {message}")]
    MalformedResponse { model: String, message: String },
    #[error("model '{model}': credential '{var}' is not set in the environment")]
    CredentialMissing { model: String, var: String },
    #[error("model '{model}': no base_url configured")]
    MissingBaseUrl { model: String },
    #[error("model '{model}': scripted failure: {message}")]
    Scripted { model: String, message: String },
    #[error("model '{model}': scripted-mock model has no script")]
    NoScript { model: String },
    #[error("model '{model}': {attempts} attempts exhausted: [{causes}]")]
    Exhausted {
        model: String,
        attempts: u32,
        causes: String,
    },
}

impl GatewayError {
    /// Transport errors and 429/5xx responses are worth retrying; other
    /// HTTP statuses are not.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport { .. } => true,
            GatewayError::Status { status, .. } => *status == 429 || *status >= 500,
            GatewayError::Scripted { .. } => true,
            _ => false,
        }
    }
}

/// Declared function tool, sent under the standard function-tool envelope.
#[derive(Debug, Clone)]
pub struct ToolDecl {
    pub name: String,
    pub description: String,
    pub parameters: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub model: ModelConfig,
    pub messages: Vec<Message>,
    pub sampling: Option<Sampling>,
    pub tools: Vec<ToolDecl>,
}

impl ChatRequest {
    pub fn new(model: &ModelConfig, messages: Vec<Message>) -> Self {
        Self {
            model: model.clone(),
            messages,
            sampling: model.sampling.clone(),
            tools: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolCallPayload {
    pub name: String,
    pub arguments: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

/// Provider response mapped to a common shape.
#[derive(Debug, Clone)]
pub struct Completion {
    pub text: String,
    pub tool_call: Option<ToolCallPayload>,
    pub usage: Option<Usage>,
    pub latency: Duration,
}

impl Completion {
    pub fn from_text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            tool_call: None,
            usage: None,
            latency: Duration::ZERO,
        }
    }
}

/// Canned completions for the scripted-mock provider. Call index `i` resolves
/// to `turns[min(i, len - 1)]` regardless of request content.
#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    turns: Vec<ScriptEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptEntry {
    Text(String),
    ToolCall {
        name: String,
        arguments: serde_json::Value,
    },
    /// Simulated transient provider failure (retryable).
    Fail(String),
}

impl Script {
    pub fn new(turns: Vec<ScriptEntry>) -> Self {
        assert!(!turns.is_empty(), "script must be non-empty");
        Self { turns }
    }

    pub fn of_texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self::new(
            texts
                .into_iter()
                .map(|t| ScriptEntry::Text(t.into()))
                .collect(),
        )
    }

    pub fn turn(&self, index: usize) -> &ScriptEntry {
        &self.turns[index.min(self.turns.len() - 1)]
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

/// Backoff policy for [`GatewaySession::chat_with_retry`]: exponential with
/// full jitter, capped by `max_delay`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(10),
        }
    }
}

impl RetryPolicy {
    /// Upper bound for the sleep before attempt `attempt + 1` (0-based).
    fn delay_cap(&self, attempt: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(2u32.saturating_pow(attempt));
        exp.min(self.max_delay)
    }
}

pub type RequestLog = Arc<Mutex<Vec<ChatRequest>>>;

pub struct GatewayBuilder {
    timeout: Duration,
    concurrency: Option<usize>,
    retry: RetryPolicy,
    recorder: Option<RequestLog>,
}

impl Default for GatewayBuilder {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            concurrency: None,
            retry: RetryPolicy::default(),
            recorder: None,
        }
    }
}

impl GatewayBuilder {
    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Run-level cap on concurrently in-flight provider calls.
    pub fn concurrency(mut self, limit: usize) -> Self {
        self.concurrency = Some(limit.max(1));
        self
    }

    pub fn retry(mut self, policy: RetryPolicy) -> Self {
        self.retry = policy;
        self
    }

    /// Records every outgoing request; used by tests to inspect contexts.
    pub fn recorder(mut self, log: RequestLog) -> Self {
        self.recorder = Some(log);
        self
    }

    pub fn build(self) -> Gateway {
        let http = reqwest::Client::builder()
            .timeout(self.timeout)
            .build()
            .expect("reqwest client construction cannot fail with these options");
        Gateway {
            http,
            permits: self.concurrency.map(|n| Arc::new(Semaphore::new(n))),
            retry: self.retry,
            recorder: self.recorder,
            calls: AtomicU64::new(0),
        }
    }
}

/// Shared, concurrency-safe entry point for all provider calls in a run.
pub struct Gateway {
    http: reqwest::Client,
    permits: Option<Arc<Semaphore>>,
    retry: RetryPolicy,
    recorder: Option<RequestLog>,
    calls: AtomicU64,
}

impl Gateway {
    pub fn builder() -> GatewayBuilder {
        GatewayBuilder::default()
    }

    /// Total provider invocations since construction (attempts included).
    pub fn total_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    /// Opens a session with fresh scripted-replay cursors. One session per
    /// case keeps scripted output independent of scheduling.
    pub fn session(self: &Arc<Self>) -> GatewaySession {
        GatewaySession {
            gateway: Arc::clone(self),
            cursors: Mutex::new(HashMap::new()),
        }
    }

    async fn dispatch(
        &self,
        request: &ChatRequest,
        script_index: usize,
    ) -> Result<Completion, GatewayError> {
        let _permit = match &self.permits {
            Some(semaphore) => Some(
                Arc::clone(semaphore)
                    .acquire_owned()
                    .await
                    .expect("gateway semaphore never closes"),
            ),
            None => None,
        };
        self.calls.fetch_add(1, Ordering::Relaxed);
        if let Some(log) = &self.recorder {
            log.lock().expect("recorder lock").push(request.clone());
        }
        tracing::debug!(model = %request.model.id, messages = request.messages.len(), "chat");
        match request.model.provider {
            Provider::ScriptedMock => scripted_completion(request, script_index),
            Provider::OpenAiCompatible => openai::chat(&self.http, request).await,
        }
    }
}

fn scripted_completion(request: &ChatRequest, index: usize) -> Result<Completion, GatewayError> {
    let script = request
        .model
        .script
        .as_ref()
        .ok_or_else(|| GatewayError::NoScript {
            model: request.model.id.clone(),
        })?;
    match script.turn(index) {
        ScriptEntry::Text(text) => Ok(Completion::from_text(text.clone())),
        ScriptEntry::ToolCall { name, arguments } => Ok(Completion {
            text: String::new(),
            tool_call: Some(ToolCallPayload {
                name: name.clone(),
                arguments: arguments.clone(),
            }),
            usage: None,
            latency: Duration::ZERO,
        }),
        ScriptEntry::Fail(message) => Err(GatewayError::Scripted {
            model: request.model.id.clone(),
            message: message.clone(),
        }),
    }
}

/// Per-worker view of the gateway. Scripted models advance one cursor per
/// call within the session; HTTP models share the gateway pool.
pub struct GatewaySession {
    gateway: Arc<Gateway>,
    cursors: Mutex<HashMap<String, usize>>,
}

impl GatewaySession {
    pub fn gateway_retry_policy(&self) -> RetryPolicy {
        self.gateway.retry
    }

    fn next_index(&self, model_id: &str) -> usize {
        let mut cursors = self.cursors.lock().expect("cursor lock");
        let slot = cursors.entry(model_id.to_string()).or_insert(0);
        let index = *slot;
        *slot += 1;
        index
    }

    /// One provider call, no retries.
    pub async fn chat(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let index = self.next_index(&request.model.id);
        self.gateway.dispatch(request, index).await
    }

    /// Retries transport errors and 429/5xx with exponential backoff and
    /// full jitter; other failures return immediately.
    pub async fn chat_with_retry(
        &self,
        request: &ChatRequest,
        policy: &RetryPolicy,
    ) -> Result<Completion, GatewayError> {
        assert!(
            policy.max_attempts >= 1,
            "policy requires max_attempts >= 1"
        );
        let mut causes: Vec<String> = Vec::new();
        for attempt in 0..policy.max_attempts {
            match self.chat(request).await {
                Ok(completion) => return Ok(completion),
                Err(err) if err.is_retryable() => {
                    tracing::warn!(model = %request.model.id, attempt, error = %err, "retryable failure");
                    causes.push(format!("attempt {}: {err}", attempt + 1));
                    if attempt + 1 < policy.max_attempts {
                        let cap = policy.delay_cap(attempt);
                        let jittered = rand::thread_rng().gen_range(0..=cap.as_millis() as u64);
                        tokio::time::sleep(Duration::from_millis(jittered)).await;
                    }
                }
                Err(err) => return Err(err),
            }
        }
        Err(GatewayError::Exhausted {
            model: request.model.id.clone(),
            attempts: policy.max_attempts,
            causes: causes.join("; "),
        })
    }

    /// Convenience wrapper using the gateway-wide default policy.
    pub async fn chat_with_default_retry(
        &self,
        request: &ChatRequest,
    ) -> Result<Completion, GatewayError> {
        let policy = self.gateway.retry;
        self.chat_with_retry(request, &policy).await
    }
}
