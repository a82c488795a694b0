//! Declarative experiment configuration: parsing, validation, task expansion.
//!
//! One YAML file describes an entire experiment: the model registry, the
//! agents and their prompts, the task variables, the interaction graph
//! (`directions`) and the judge (`evaluation`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{Script, ScriptEntry};
use crate::graph::{self, GraphError};
use crate::template::{self, TemplateError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax error: {message}")]
    Syntax { message: String },
    #[error("unknown top-level key '{key}'")]
    UnknownSection { key: String },
    #[error("missing required section '{section}'")]
    MissingSection { section: &'static str },
    #[error("invalid '{section}' section: {message}")]
    Schema {
        section: &'static str,
        message: String,
    },
    #[error("{referrer} references undefined {kind} '{reference}'")]
    CrossRef {
        kind: &'static str,
        reference: String,
        referrer: String,
    },
    #[error("{0}")]
    Invariant(String),
    #[error("{0}")]
    Task(String),
    #[error("invalid direction: {0}")]
    Direction(#[from] GraphError),
    #[error("invalid template in {location}: {source}")]
    Template {
        location: String,
        source: TemplateError,
    },
}

/// Chat roles accepted in prompt templates and wire messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::System => write!(f, "system"),
            Role::User => write!(f, "user"),
            Role::Assistant => write!(f, "assistant"),
        }
    }
}

/// A rendered chat message, ready for the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// API credential, either inline or resolved from the environment at use.
#[derive(Debug, Clone, PartialEq)]
pub enum ApiKeyRef {
    Literal(SecretKey),
    Env(String),
}

impl ApiKeyRef {
    pub fn parse(raw: &str) -> Self {
        match raw.strip_prefix("env:") {
            Some(var) => ApiKeyRef::Env(var.trim().to_string()),
            None => ApiKeyRef::Literal(SecretKey(raw.to_string())),
        }
    }

    /// Resolves to the key material, or `None` when an env reference is unset.
    pub fn resolve(&self) -> Option<String> {
        match self {
            ApiKeyRef::Literal(key) => Some(key.0.clone()),
            ApiKeyRef::Env(var) => std::env::var(var).ok(),
        }
    }
}

// Key material must never reach logs or exports, so both Debug and Serialize
// are redacted.
#[derive(Clone, PartialEq)]
pub struct SecretKey(String);

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey(***)")
    }
}

impl Serialize for ApiKeyRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            ApiKeyRef::Literal(_) => serializer.serialize_str("***"),
            ApiKeyRef::Env(var) => serializer.serialize_str(&format!("env:{var}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provider {
    OpenAiCompatible,
    ScriptedMock,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u64>,
}

/// One entry of the model registry.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub id: String,
    pub provider: Provider,
    pub base_url: Option<String>,
    pub api_key: Option<ApiKeyRef>,
    pub model_name: String,
    pub sampling: Option<Sampling>,
    /// Canned completions, present only for scripted-mock models.
    pub script: Option<Script>,
}

pub const DEFAULT_OPENAI_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub role: Role,
    #[serde(default)]
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryPolicy {
    pub keep_turns: u32,
}

#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub id: String,
    pub model: String,
    pub prompt: Vec<PromptTemplate>,
    pub memory: Option<MemoryPolicy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Index-aligned zip over equally sized value lists.
    Union,
    /// Full cross product in lexicographic variable order.
    Cartesian,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub start_prompt: PromptTemplate,
    pub mode: TaskMode,
    pub content: BTreeMap<String, Vec<String>>,
}

/// One concrete test case produced by task expansion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestCase {
    pub case_id: String,
    pub bindings: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    Int,
    Float,
    Str,
    Bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricField {
    #[serde(rename = "field")]
    pub name: String,
    #[serde(rename = "type")]
    pub value_type: FieldType,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatMode {
    /// Schema and example appended to the prompt; reply parsed for JSON.
    Prompt,
    /// Schema declared as a callable function tool.
    Tool,
}

#[derive(Debug, Clone)]
pub struct EvaluationSpec {
    pub model: String,
    pub name: String,
    pub prompt: Vec<PromptTemplate>,
    pub format: Vec<MetricField>,
    pub format_mode: FormatMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunLimits {
    #[serde(default = "default_max_turns")]
    pub max_turns: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: u32,
}

fn default_max_turns() -> u32 {
    20
}

fn default_concurrency() -> u32 {
    8
}

impl Default for RunLimits {
    fn default() -> Self {
        Self {
            max_turns: default_max_turns(),
            concurrency: default_concurrency(),
        }
    }
}

/// Fully validated root of one experiment file.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub models: Vec<ModelConfig>,
    pub agents: Vec<AgentSpec>,
    pub tasks: TaskSpec,
    pub directions: Vec<String>,
    pub evaluation: EvaluationSpec,
    pub limits: RunLimits,
}

impl ExperimentConfig {
    pub fn model(&self, id: &str) -> Option<&ModelConfig> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn agent(&self, id: &str) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn agent_ids(&self) -> Vec<&str> {
        self.agents.iter().map(|a| a.id.as_str()).collect()
    }

    pub fn build_graph(&self) -> Result<graph::WorkflowGraph, GraphError> {
        graph::build_graph(&self.agents, &self.directions)
    }

    pub fn expand_tasks(&self) -> Result<Vec<TestCase>, ConfigError> {
        expand_tasks(&self.evaluation.name, &self.tasks)
    }
}

// ---------------------------------------------------------------------------
// Raw deserialization shells (YAML shape before validation)
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    api_key: Option<String>,
    #[serde(default)]
    base_url: Option<String>,
    #[serde(default, rename = "model")]
    model_name: Option<String>,
    #[serde(default)]
    sampling: Option<Sampling>,
    #[serde(default)]
    script: Option<Vec<RawScriptEntry>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawScriptEntry {
    Text(String),
    Structured(RawStructuredEntry),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStructuredEntry {
    #[serde(default)]
    tool_call: Option<RawToolCall>,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawToolCall {
    name: String,
    #[serde(default)]
    arguments: serde_json::Value,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAgent {
    model: String,
    prompt: Vec<PromptTemplate>,
    #[serde(default)]
    memory: Option<MemoryPolicy>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvaluation {
    model: String,
    name: String,
    prompt: Vec<PromptTemplate>,
    format: Vec<MetricField>,
    format_mode: FormatMode,
}

const SECTIONS: [&str; 6] = [
    "models",
    "agents",
    "tasks",
    "directions",
    "evaluation",
    "limits",
];
const REQUIRED_SECTIONS: [&str; 5] = ["models", "agents", "tasks", "directions", "evaluation"];

fn syntax_error(err: serde_yaml::Error) -> ConfigError {
    let message = match err.location() {
        Some(loc) => format!("{} (line {}, column {})", err, loc.line(), loc.column()),
        None => err.to_string(),
    };
    ConfigError::Syntax { message }
}

fn section<T: for<'de> Deserialize<'de>>(
    value: serde_yaml::Value,
    name: &'static str,
) -> Result<T, ConfigError> {
    serde_yaml::from_value(value).map_err(|e| ConfigError::Schema {
        section: name,
        message: e.to_string(),
    })
}

/// Parses and fully validates one experiment file.
pub fn parse_config(source_text: &str) -> Result<ExperimentConfig, ConfigError> {
    let root: serde_yaml::Value = serde_yaml::from_str(source_text).map_err(syntax_error)?;
    let mapping = match root {
        serde_yaml::Value::Mapping(m) => m,
        _ => {
            return Err(ConfigError::Syntax {
                message: "top level must be a mapping".into(),
            })
        }
    };

    for key in mapping.keys() {
        let key = key.as_str().unwrap_or_default();
        if !SECTIONS.contains(&key) {
            return Err(ConfigError::UnknownSection {
                key: key.to_string(),
            });
        }
    }
    for required in REQUIRED_SECTIONS {
        if !mapping.contains_key(required) {
            return Err(ConfigError::MissingSection { section: required });
        }
    }

    let take = |name: &str| mapping.get(name).cloned();

    let raw_models: BTreeMap<String, RawModel> =
        section(take("models").expect("checked"), "models")?;
    let raw_agents: BTreeMap<String, RawAgent> =
        section(take("agents").expect("checked"), "agents")?;
    let tasks: TaskSpec = section(take("tasks").expect("checked"), "tasks")?;
    let directions: Vec<String> = section(take("directions").expect("checked"), "directions")?;
    let raw_evaluation: RawEvaluation =
        section(take("evaluation").expect("checked"), "evaluation")?;
    let limits: RunLimits = match take("limits") {
        Some(value) => section(value, "limits")?,
        None => RunLimits::default(),
    };

    let models = raw_models
        .into_iter()
        .map(|(id, raw)| validate_model(id, raw))
        .collect::<Result<Vec<_>, _>>()?;
    let agents = raw_agents
        .into_iter()
        .map(|(id, raw)| validate_agent(id, raw, &models))
        .collect::<Result<Vec<_>, _>>()?;
    validate_tasks(&tasks)?;
    let evaluation = validate_evaluation(raw_evaluation, &models)?;

    if limits.max_turns == 0 || limits.concurrency == 0 {
        return Err(ConfigError::Invariant(
            "limits.max_turns and limits.concurrency must be >= 1".into(),
        ));
    }

    let config = ExperimentConfig {
        models,
        agents,
        tasks,
        directions,
        evaluation,
        limits,
    };
    // Directions must parse and form a well-shaped graph.
    config.build_graph()?;
    Ok(config)
}

fn validate_model(id: String, raw: RawModel) -> Result<ModelConfig, ConfigError> {
    let provider = match raw.kind.as_str() {
        "openai" | "openai-compatible" => Provider::OpenAiCompatible,
        "scripted" | "scripted-mock" => Provider::ScriptedMock,
        other => {
            return Err(ConfigError::Schema {
                section: "models",
                message: format!("model '{id}' has unknown type '{other}'"),
            })
        }
    };
    let model_name = raw.model_name.unwrap_or_default();
    if provider == Provider::OpenAiCompatible && model_name.is_empty() {
        return Err(ConfigError::Invariant(format!(
            "model '{id}' is openai-compatible and must set a non-empty 'model' name"
        )));
    }
    let script = match raw.script {
        Some(entries) => {
            if provider != Provider::ScriptedMock {
                return Err(ConfigError::Invariant(format!(
                    "model '{id}' declares a script but is not scripted-mock"
                )));
            }
            Some(parse_script(&id, entries)?)
        }
        None => None,
    };
    if provider == Provider::ScriptedMock && script.is_none() {
        return Err(ConfigError::Invariant(format!(
            "scripted model '{id}' must declare a non-empty 'script'"
        )));
    }
    let base_url = match (provider, raw.base_url) {
        (Provider::OpenAiCompatible, None) => Some(DEFAULT_OPENAI_BASE_URL.to_string()),
        (_, url) => url,
    };
    Ok(ModelConfig {
        id,
        provider,
        base_url,
        api_key: raw
            .api_key
            .filter(|s| !s.trim().is_empty())
            .map(|s| ApiKeyRef::parse(&s)),
        model_name,
        sampling: raw.sampling,
        script,
    })
}

fn parse_script(model_id: &str, entries: Vec<RawScriptEntry>) -> Result<Script, ConfigError> {
    if entries.is_empty() {
        return Err(ConfigError::Invariant(format!(
            "scripted model '{model_id}' must declare a non-empty 'script'"
        )));
    }
    let turns = entries
        .into_iter()
        .map(|entry| match entry {
            RawScriptEntry::Text(text) => Ok(ScriptEntry::Text(text)),
            RawScriptEntry::Structured(s) => match (s.tool_call, s.error) {
                (Some(call), None) => Ok(ScriptEntry::ToolCall {
                    name: call.name,
                    arguments: call.arguments,
                }),
                (None, Some(message)) => Ok(ScriptEntry::Fail(message)),
                _ => Err(ConfigError::Schema {
                    section: "models",
                    message: format!(
                        "script entry of model '{model_id}' must be text, tool_call, or error"
                    ),
                }),
            },
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Script::new(turns))
}

fn validate_templates(templates: &[PromptTemplate], location: &str) -> Result<(), ConfigError> {
    for (idx, t) in templates.iter().enumerate() {
        template::validate(&t.content).map_err(|source| ConfigError::Template {
            location: format!("{location}[{idx}]"),
            source,
        })?;
    }
    Ok(())
}

fn validate_agent(
    id: String,
    raw: RawAgent,
    models: &[ModelConfig],
) -> Result<AgentSpec, ConfigError> {
    if graph::is_sentinel(&id) {
        return Err(ConfigError::Invariant(format!(
            "'{id}' is a reserved node name and cannot be an agent id"
        )));
    }
    if !models.iter().any(|m| m.id == raw.model) {
        return Err(ConfigError::CrossRef {
            kind: "model",
            reference: raw.model,
            referrer: format!("agent '{id}'"),
        });
    }
    if raw.prompt.is_empty() {
        return Err(ConfigError::Invariant(format!(
            "agent '{id}' must declare at least one prompt template"
        )));
    }
    for (idx, t) in raw.prompt.iter().enumerate() {
        if t.role == Role::System && idx != 0 {
            return Err(ConfigError::Invariant(format!(
                "agent '{id}': a system template is only allowed as the first prompt entry"
            )));
        }
    }
    if let Some(memory) = &raw.memory {
        if memory.keep_turns == 0 {
            return Err(ConfigError::Invariant(format!(
                "agent '{id}': memory.keep_turns must be >= 1"
            )));
        }
    }
    validate_templates(&raw.prompt, &format!("agents.{id}.prompt"))?;
    Ok(AgentSpec {
        id,
        model: raw.model,
        prompt: raw.prompt,
        memory: raw.memory,
    })
}

fn validate_tasks(tasks: &TaskSpec) -> Result<(), ConfigError> {
    if tasks.content.is_empty() {
        return Err(ConfigError::Task(
            "tasks.content must define at least one variable".into(),
        ));
    }
    for (name, values) in &tasks.content {
        if name.trim().is_empty() {
            return Err(ConfigError::Task(
                "task variable names must be non-empty".into(),
            ));
        }
        if values.is_empty() {
            return Err(ConfigError::Task(format!(
                "task variable '{name}' must list at least one value"
            )));
        }
    }
    if tasks.mode == TaskMode::Union {
        check_union_lengths(&tasks.content)?;
    }
    template::validate(&tasks.start_prompt.content).map_err(|source| ConfigError::Template {
        location: "tasks.start_prompt".into(),
        source,
    })?;
    Ok(())
}

fn check_union_lengths(content: &BTreeMap<String, Vec<String>>) -> Result<(), ConfigError> {
    let mut iter = content.iter();
    let (first_name, first_values) = iter.next().expect("content checked non-empty");
    for (name, values) in iter {
        if values.len() != first_values.len() {
            return Err(ConfigError::Task(format!(
                "union mode requires equal list lengths, but '{first_name}' has {} and '{name}' has {}",
                first_values.len(),
                values.len()
            )));
        }
    }
    Ok(())
}

fn validate_evaluation(
    raw: RawEvaluation,
    models: &[ModelConfig],
) -> Result<EvaluationSpec, ConfigError> {
    if !models.iter().any(|m| m.id == raw.model) {
        return Err(ConfigError::CrossRef {
            kind: "model",
            reference: raw.model,
            referrer: "evaluation".into(),
        });
    }
    if raw.format.is_empty() {
        return Err(ConfigError::Invariant(
            "evaluation.format must declare at least one field".into(),
        ));
    }
    let mut seen = BTreeSet::new();
    for field in &raw.format {
        if field.name.trim().is_empty() {
            return Err(ConfigError::Invariant(
                "evaluation.format field names must be non-empty".into(),
            ));
        }
        if !seen.insert(field.name.as_str()) {
            return Err(ConfigError::Invariant(format!(
                "duplicate evaluation field '{}'",
                field.name
            )));
        }
    }
    if !is_filesystem_safe(&raw.name) {
        return Err(ConfigError::Invariant(format!(
            "evaluation.name '{}' is not filesystem-safe",
            raw.name
        )));
    }
    validate_templates(&raw.prompt, "evaluation.prompt")?;
    Ok(EvaluationSpec {
        model: raw.model,
        name: raw.name,
        prompt: raw.prompt,
        format: raw.format,
        format_mode: raw.format_mode,
    })
}

fn is_filesystem_safe(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

// ---------------------------------------------------------------------------
// Task expansion
// ---------------------------------------------------------------------------

fn bindings_digest(bindings: &BTreeMap<String, String>) -> String {
    let mut hasher = Sha256::new();
    for (key, value) in bindings {
        hasher.update(key.as_bytes());
        hasher.update([0x1f]);
        hasher.update(value.as_bytes());
        hasher.update([0x1e]);
    }
    let digest = hasher.finalize();
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}

fn case_id(run_name: &str, index: usize, bindings: &BTreeMap<String, String>) -> String {
    format!("{run_name}/{index:04}-{}", bindings_digest(bindings))
}

/// Expands task variables into concrete, deterministically ordered test cases.
pub fn expand_tasks(run_name: &str, spec: &TaskSpec) -> Result<Vec<TestCase>, ConfigError> {
    validate_tasks_content(spec)?;
    let names: Vec<&String> = spec.content.keys().collect();
    let bindings_list: Vec<BTreeMap<String, String>> = match spec.mode {
        TaskMode::Union => {
            check_union_lengths(&spec.content)?;
            let len = spec.content.values().next().map_or(0, Vec::len);
            (0..len)
                .map(|i| {
                    names
                        .iter()
                        .map(|&name| (name.clone(), spec.content[name][i].clone()))
                        .collect()
                })
                .collect()
        }
        TaskMode::Cartesian => {
            let mut out: Vec<BTreeMap<String, String>> = vec![BTreeMap::new()];
            for &name in &names {
                let mut next = Vec::with_capacity(out.len() * spec.content[name].len());
                for partial in &out {
                    for value in &spec.content[name] {
                        let mut bindings = partial.clone();
                        bindings.insert(name.clone(), value.clone());
                        next.push(bindings);
                    }
                }
                out = next;
            }
            out
        }
    };
    Ok(bindings_list
        .into_iter()
        .enumerate()
        .map(|(index, bindings)| TestCase {
            case_id: case_id(run_name, index, &bindings),
            bindings,
        })
        .collect())
}

fn validate_tasks_content(spec: &TaskSpec) -> Result<(), ConfigError> {
    if spec.content.is_empty() {
        return Err(ConfigError::Task(
            "tasks.content must define at least one variable".into(),
        ));
    }
    for (name, values) in &spec.content {
        if values.is_empty() {
            return Err(ConfigError::Task(format!(
                "task variable '{name}' must list at least one value"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BOXES: &str = r#"
models:
  model1:
    type: openai
    api_key:
    model: gpt-4o-mini
  model2:
    type: openai
    api_key: env:STUDENT_KEY
    model: gpt-4o-mini
  model3:
    type: openai
    api_key:
    model: gpt-4o-mini

agents:
  teacher:
    model: model1
    prompt:
      - role: system
        content: YOUR-TEACHER-SYSTEM-PROMPT-HERE
      - role: user
        content: "Here is the question for today's one-on-one session: {question}"
    memory:
      keep_turns: 3
  student:
    model: model2
    prompt:
      - role: system
        content: |
          You are a student with the following profile: {image}.
          AND-YOUR-STUDENT-SYSTEM-PROMPT

tasks:
  start_prompt:
    role: user
    content: ""
  mode: union
  content:
    image:
      - IMAGE1
      - IMAGE2
    question:
      - QUESTION1
      - QUESTION2

directions:
  - START -> teacher
  - teacher -> router:any_keyword_route(keywords=["class over", "see you"], exists_to=END, else_to="student")
  - student -> teacher

evaluation:
  model: model3
  name: config_modelname
  prompt:
    - role: system
      content: |
        YOUR-JUDGE-SYSTEM-PROMPT-HERE

        Exercise:
        {task.question}

        Teaching Dialogue:
        {messages.as_dialog()}
  format:
    - field: Accuracy
      type: int
      description: scoring accuracy
    - field: Guidance
      type: int
      description: guidance quality
  format_mode: prompt
"#;

    #[test]
    fn parses_configuration_boxes() {
        let config = parse_config(BOXES).unwrap();
        assert_eq!(config.agents.len(), 2);
        let teacher = config.agent("teacher").unwrap();
        assert_eq!(teacher.memory, Some(MemoryPolicy { keep_turns: 3 }));
        assert_eq!(config.limits.max_turns, 20);
        assert_eq!(config.limits.concurrency, 8);
        assert_eq!(config.evaluation.format.len(), 2);
        assert_eq!(
            config.model("model1").unwrap().base_url.as_deref(),
            Some(DEFAULT_OPENAI_BASE_URL)
        );
    }

    #[test]
    fn parse_is_deterministic() {
        let a = parse_config(BOXES).unwrap();
        let b = parse_config(BOXES).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn undefined_model_reference_is_named() {
        let text = BOXES.replace("model: model1", "model: model9");
        let err = parse_config(&text).unwrap_err();
        match err {
            ConfigError::CrossRef { reference, .. } => assert_eq!(reference, "model9"),
            other => panic!("expected cross-ref error, got {other:?}"),
        }
    }

    #[test]
    fn empty_tasks_content_rejected() {
        let text = BOXES.replace(
            "  content:\n    image:\n      - IMAGE1\n      - IMAGE2\n    question:\n      - QUESTION1\n      - QUESTION2",
            "  content: {}",
        );
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, ConfigError::Task(ref m) if m.contains("at least one variable")));
    }

    #[test]
    fn unknown_top_level_key_rejected() {
        let text = format!("{BOXES}\nextra_section: 1\n");
        assert!(matches!(
            parse_config(&text),
            Err(ConfigError::UnknownSection { ref key }) if key == "extra_section"
        ));
    }

    #[test]
    fn missing_section_rejected() {
        let text = BOXES.replace("directions:", "directions_off:");
        // Renamed key first trips the unknown-key check; drop it entirely instead.
        let text: String = text
            .lines()
            .filter(|l| {
                !l.starts_with("directions_off")
                    && !l.trim_start().starts_with("- START")
                    && !l.trim_start().starts_with("- teacher ->")
                    && !l.trim_start().starts_with("- student ->")
            })
            .collect::<Vec<_>>()
            .join("\n");
        assert!(matches!(
            parse_config(&text),
            Err(ConfigError::MissingSection {
                section: "directions"
            })
        ));
    }

    #[test]
    fn union_zip_expansion() {
        let config = parse_config(BOXES).unwrap();
        let cases = config.expand_tasks().unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[0].bindings["image"], "IMAGE1");
        assert_eq!(cases[0].bindings["question"], "QUESTION1");
        assert_eq!(cases[1].bindings["image"], "IMAGE2");
        assert_eq!(cases[1].bindings["question"], "QUESTION2");
        assert!(cases[0].case_id.starts_with("config_modelname/0000-"));
    }

    #[test]
    fn union_unequal_lengths_report_both() {
        let mut content = BTreeMap::new();
        content.insert("a".to_string(), vec!["1".into(), "2".into()]);
        content.insert("b".to_string(), vec!["x".into()]);
        let spec = TaskSpec {
            start_prompt: PromptTemplate {
                role: Role::User,
                content: String::new(),
            },
            mode: TaskMode::Union,
            content,
        };
        let err = expand_tasks("t", &spec).unwrap_err();
        let message = err.to_string();
        assert!(message.contains('2') && message.contains('1'), "{message}");
    }

    #[test]
    fn cartesian_expansion_order() {
        let mut content = BTreeMap::new();
        content.insert("a".to_string(), vec!["1".into(), "2".into()]);
        content.insert("b".to_string(), vec!["x".into(), "y".into(), "z".into()]);
        let spec = TaskSpec {
            start_prompt: PromptTemplate {
                role: Role::User,
                content: String::new(),
            },
            mode: TaskMode::Cartesian,
            content,
        };
        let cases = expand_tasks("t", &spec).unwrap();
        let pairs: Vec<(String, String)> = cases
            .iter()
            .map(|c| (c.bindings["a"].clone(), c.bindings["b"].clone()))
            .collect();
        let expected = [
            ("1", "x"),
            ("1", "y"),
            ("1", "z"),
            ("2", "x"),
            ("2", "y"),
            ("2", "z"),
        ]
        .map(|(a, b)| (a.to_string(), b.to_string()));
        assert_eq!(pairs, expected);
    }

    #[test]
    fn single_variable_single_value_yields_one_case() {
        let mut content = BTreeMap::new();
        content.insert("q".to_string(), vec!["only".into()]);
        let spec = TaskSpec {
            start_prompt: PromptTemplate {
                role: Role::User,
                content: String::new(),
            },
            mode: TaskMode::Union,
            content,
        };
        let cases = expand_tasks("t", &spec).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].bindings.len(), 1);
    }

    #[test]
    fn case_ids_are_stable() {
        let config = parse_config(BOXES).unwrap();
        let a = config.expand_tasks().unwrap();
        let b = config.expand_tasks().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn api_keys_never_serialize() {
        let key = ApiKeyRef::parse("sk-super-secret");
        let json = serde_json::to_string(&key).unwrap();
        assert!(!json.contains("super-secret"));
        assert!(!format!("{key:?}").contains("super-secret"));
        let env = ApiKeyRef::parse("env:MY_KEY");
        assert_eq!(serde_json::to_string(&env).unwrap(), "\"env:MY_KEY\"");
    }

    #[test]
    fn yaml_syntax_error_carries_position() {
        let err = parse_config("models: [unclosed").unwrap_err();
        match err {
            ConfigError::Syntax { message } => assert!(message.contains("line"), "{message}"),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn system_template_must_come_first() {
        let text = BOXES.replace(
            "      - role: system\n        content: YOUR-TEACHER-SYSTEM-PROMPT-HERE\n      - role: user\n        content: \"Here is the question for today's one-on-one session: {question}\"",
            "      - role: user\n        content: \"hello\"\n      - role: system\n        content: \"late system\"",
        );
        assert!(matches!(
            parse_config(&text),
            Err(ConfigError::Invariant(_))
        ));
    }
}
