//! Turn-by-turn execution of test cases over the workflow graph.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::Serialize;
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::config::{ExperimentConfig, MemoryPolicy, Message, Role, TestCase};
use crate::gateway::{ChatRequest, Gateway, GatewaySession};
use crate::graph::{self, NodeId, WorkflowGraph};
use crate::store::{RunStore, StoreError};
use crate::template::{self, RenderContext};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
}

/// One persisted transcript entry, attributed to the node that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributedMessage {
    pub case_id: String,
    pub seq: u32,
    pub agent: NodeId,
    pub role: Role,
    pub content: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    RouterEnd,
    MaxTurns,
    Error,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::RouterEnd => "router_end",
            Termination::MaxTurns => "max_turns",
            Termination::Error => "error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "router_end" => Some(Termination::RouterEnd),
            "max_turns" => Some(Termination::MaxTurns),
            "error" => Some(Termination::Error),
            _ => None,
        }
    }
}

/// Complete transcript of one case plus how it ended.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DialogueRecord {
    pub case_id: String,
    pub messages: Vec<AttributedMessage>,
    pub termination: Termination,
    pub error_detail: Option<String>,
}

/// Receives each message immediately after it is produced, before the
/// case's next gateway call.
pub trait MessageSink: Send + Sync {
    fn append(&self, message: &AttributedMessage) -> Result<(), StoreError>;
}

/// Discards messages; useful for dry runs and tests.
pub struct NullSink;

impl MessageSink for NullSink {
    fn append(&self, _message: &AttributedMessage) -> Result<(), StoreError> {
        Ok(())
    }
}

/// Applies the agent's memory policy to the shared transcript: keeps the
/// suffix covering the last `keep_turns` turns, where a turn is a maximal
/// run of distinct speakers. Whole turns only, never a partial prefix.
pub fn apply_memory_window<'a>(
    transcript: &'a [AttributedMessage],
    policy: Option<&MemoryPolicy>,
) -> &'a [AttributedMessage] {
    let Some(policy) = policy else {
        return transcript;
    };
    let keep = policy.keep_turns as usize;
    let mut turn_starts: Vec<usize> = Vec::new();
    let mut seen: Vec<&str> = Vec::new();
    for (i, message) in transcript.iter().enumerate() {
        let speaker = message.agent.as_str();
        if i == 0 {
            turn_starts.push(0);
        } else if seen.contains(&speaker) {
            turn_starts.push(i);
            seen.clear();
        }
        seen.push(speaker);
    }
    if turn_starts.len() <= keep {
        transcript
    } else {
        &transcript[turn_starts[turn_starts.len() - keep]..]
    }
}

fn build_context(
    agent: &crate::config::AgentSpec,
    case: &TestCase,
    transcript: &[AttributedMessage],
) -> Result<Vec<Message>, template::TemplateError> {
    let ctx = RenderContext::with_bindings(&case.bindings);
    let mut messages = Vec::with_capacity(agent.prompt.len() + transcript.len());
    for prompt in &agent.prompt {
        messages.push(template::render_template(prompt, &ctx)?);
    }
    // Shared transcript, windowed: the agent's own messages appear as
    // assistant turns, everyone else's as user turns.
    for message in apply_memory_window(transcript, agent.memory.as_ref()) {
        let role = if message.agent.as_str() == agent.id {
            Role::Assistant
        } else {
            Role::User
        };
        messages.push(Message::new(role, message.content.clone()));
    }
    Ok(messages)
}

/// Runs one case to completion. Failures end the dialogue with
/// `termination = error`; everything produced so far stays persisted.
pub async fn run_case(
    graph: &WorkflowGraph,
    case: &TestCase,
    config: &ExperimentConfig,
    session: &GatewaySession,
    sink: &dyn MessageSink,
) -> DialogueRecord {
    let mut messages: Vec<AttributedMessage> = Vec::new();
    let mut seq: u32 = 0;

    let fail = |messages: Vec<AttributedMessage>, detail: String| DialogueRecord {
        case_id: case.case_id.clone(),
        messages,
        termination: Termination::Error,
        error_detail: Some(detail),
    };

    // A non-empty rendered start prompt opens the dialogue as a user message
    // attributed to START.
    let start_ctx = RenderContext::with_bindings(&case.bindings);
    let start_content = match template::render(&config.tasks.start_prompt.content, &start_ctx) {
        Ok(content) => content,
        Err(e) => return fail(messages, format!("start prompt: {e}")),
    };
    if !start_content.is_empty() {
        let message = AttributedMessage {
            case_id: case.case_id.clone(),
            seq,
            agent: NodeId::start(),
            role: config.tasks.start_prompt.role,
            content: start_content,
            created_at: Utc::now(),
        };
        if let Err(e) = sink.append(&message) {
            return fail(messages, format!("persistence: {e}"));
        }
        messages.push(message);
        seq += 1;
    }

    let mut current = match graph::next_node(graph, &NodeId::start(), "") {
        Ok(node) => node,
        Err(e) => return fail(messages, e.to_string()),
    };
    let mut activations: u32 = 0;
    let retry = session_retry(session);

    let termination = loop {
        if current.is_end() {
            break Termination::RouterEnd;
        }
        if activations >= config.limits.max_turns {
            break Termination::MaxTurns;
        }
        let agent = config
            .agent(current.as_str())
            .expect("graph validation guarantees agent nodes exist");
        let model = config
            .model(&agent.model)
            .expect("config validation guarantees model refs resolve");

        let context = match build_context(agent, case, &messages) {
            Ok(context) => context,
            Err(e) => return fail(messages, format!("template: {e}")),
        };
        let request = ChatRequest::new(model, context);
        let completion = match session.chat_with_retry(&request, &retry).await {
            Ok(completion) => completion,
            Err(e) => return fail(messages, e.to_string()),
        };

        let message = AttributedMessage {
            case_id: case.case_id.clone(),
            seq,
            agent: current.clone(),
            role: Role::Assistant,
            content: completion.text,
            created_at: Utc::now(),
        };
        // Checkpoint before anything else happens for this case.
        if let Err(e) = sink.append(&message) {
            return fail(messages, format!("persistence: {e}"));
        }
        messages.push(message);
        seq += 1;
        activations += 1;

        current = match graph::next_node(
            graph,
            &current,
            &messages.last().expect("just pushed").content,
        ) {
            Ok(node) => node,
            Err(e) => return fail(messages, e.to_string()),
        };
    };

    DialogueRecord {
        case_id: case.case_id.clone(),
        messages,
        termination,
        error_detail: None,
    }
}

fn session_retry(session: &GatewaySession) -> crate::gateway::RetryPolicy {
    session.gateway_retry_policy()
}

/// Outcome counts for one `run_all` invocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunSummary {
    pub completed: usize,
    pub failed: usize,
    pub skipped: usize,
    #[serde(skip)]
    pub wall_time: Duration,
    pub peak_in_flight: usize,
    pub gateway_calls: u64,
}

/// Executes all cases with at most `limits.concurrency` in flight, skipping
/// cases already complete in the store (resume) and re-running failed ones.
pub async fn run_all(
    cases: &[TestCase],
    config: &ExperimentConfig,
    store: &RunStore,
    gateway: &Arc<Gateway>,
) -> Result<RunSummary, OrchestratorError> {
    let started = Instant::now();
    let calls_before = gateway.total_calls();
    let graph = Arc::new(config.build_graph()?);

    // Registration doubles as the store-availability gate: nothing reaches
    // the gateway if the store cannot accept writes.
    for case in cases {
        store.register_case(case)?;
    }

    let mut skipped = 0usize;
    let mut pending: Vec<TestCase> = Vec::new();
    for case in cases {
        match store.case_status(&case.case_id)? {
            Some(status) if status.is_complete() => skipped += 1,
            _ => pending.push(case.clone()),
        }
    }

    let semaphore = Arc::new(Semaphore::new(config.limits.concurrency as usize));
    let in_flight = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let shared_config = Arc::new(config.clone());

    let mut join_set = JoinSet::new();
    for case in pending {
        let semaphore = Arc::clone(&semaphore);
        let in_flight = Arc::clone(&in_flight);
        let peak = Arc::clone(&peak);
        let graph = Arc::clone(&graph);
        let config = Arc::clone(&shared_config);
        let store = store.clone();
        let gateway = Arc::clone(gateway);
        join_set.spawn(async move {
            let _permit = semaphore.acquire_owned().await.expect("semaphore open");
            let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);

            let result = async {
                // A retried case starts from a clean transcript.
                store.reset_case(&case.case_id)?;
                let session = gateway.session();
                let record = run_case(&graph, &case, &config, &session, &store).await;
                store.finish_case(&record)?;
                Ok::<Termination, StoreError>(record.termination)
            }
            .await;

            in_flight.fetch_sub(1, Ordering::SeqCst);
            result
        });
    }

    let mut completed = 0usize;
    let mut failed = 0usize;
    while let Some(joined) = join_set.join_next().await {
        match joined.expect("case worker panicked") {
            Ok(Termination::Error) => failed += 1,
            Ok(_) => completed += 1,
            Err(store_error) => return Err(store_error.into()),
        }
    }

    Ok(RunSummary {
        completed,
        failed,
        skipped,
        wall_time: started.elapsed(),
        peak_in_flight: peak.load(Ordering::SeqCst),
        gateway_calls: gateway.total_calls() - calls_before,
    })
}
