//! Core engine for declarative multi-agent dialogue simulation and
//! LLM-as-a-Judge evaluation: config parsing, workflow graphs, provider
//! gateway, turn orchestration, persistence, judging and reporting.

pub mod config;
pub mod gateway;
pub mod graph;
pub mod judge;
pub mod orchestrator;
pub mod report;
pub mod store;
pub mod template;

pub use config::{
    parse_config, AgentSpec, ApiKeyRef, EvaluationSpec, ExperimentConfig, FieldType, FormatMode,
    MemoryPolicy, Message, MetricField, ModelConfig, PromptTemplate, Provider, Role, RunLimits,
    Sampling, TaskMode, TaskSpec, TestCase,
};
pub use gateway::{
    ChatRequest, Completion, Gateway, GatewayError, GatewaySession, RetryPolicy, Script,
    ScriptEntry, ToolCallPayload, ToolDecl,
};
pub use graph::{
    build_graph, next_node, parse_direction, to_dot, DirectionEdge, EdgeTarget, GraphError, NodeId,
    RouterSpec, WorkflowGraph,
};
pub use judge::{
    evaluate_case, extract_structured, objective_metrics, schema_from_format, EvaluationResult,
    ExtractError, JudgeError, JudgeOptions, ObjectiveReport, SchemaDoc, SchemaViolation,
};
pub use orchestrator::{
    apply_memory_window, run_all, run_case, AttributedMessage, DialogueRecord, MessageSink,
    OrchestratorError, RunSummary, Termination,
};
pub use report::{
    aggregate, emit_charts, overall, parse_csv, round_half_up2, to_csv, ChartDoc, OverallRow,
    OverallTable, ReportError, ReportRow, ReportTable,
};
pub use store::{
    export_json, export_label_studio, open_run, CaseState, CaseStatus, RunStore, StoreError,
};
