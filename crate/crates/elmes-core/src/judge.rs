//! Rubric judging: schema generation, structured-output extraction,
//! evaluator calls and rule-based objective metrics.

use std::collections::BTreeMap;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::config::{EvaluationSpec, FieldType, Message, MetricField, ModelConfig, Role, TestCase};
use crate::gateway::{ChatRequest, GatewayError, GatewaySession, ToolDecl};
use crate::orchestrator::{DialogueRecord, Termination};
use crate::template::{self, RenderContext, TemplateError};

pub const LIKERT_MIN: i64 = 1;
pub const LIKERT_MAX: i64 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaViolation {
    #[error("candidate is not a JSON object")]
    NotAnObject,
    #[error("missing required field '{field}'")]
    MissingField { field: String },
    #[error("field '{field}' must be of type {expected}")]
    TypeMismatch {
        field: String,
        expected: &'static str,
    },
    #[error("unexpected field '{field}'")]
    UnknownField { field: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractError {
    #[error("no JSON found in reply")]
    NoJsonFound,
    #[error("JSON found but schema-invalid: {violation}")]
    SchemaInvalid { violation: SchemaViolation },
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("evaluation format must declare at least one field")]
    EmptyFormat,
    #[error("duplicate evaluation field '{0}'")]
    DuplicateField(String),
    #[error(transparent)]
    Extraction(#[from] ExtractError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("provider returned no tool call")]
    NoToolCall,
    #[error("field '{field}' scored {value}, outside the {LIKERT_MIN}-{LIKERT_MAX} range")]
    LikertOutOfRange { field: String, value: i64 },
    #[error("extraction failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("case '{0}' terminated with an error and judging partial transcripts is disabled")]
    RecordNotJudgeable(String),
}

/// JSON Schema for the configured metric fields, properties in declaration
/// order, all required, no additional properties.
#[derive(Debug, Clone)]
pub struct SchemaDoc {
    document: Value,
    fields: Vec<MetricField>,
}

impl SchemaDoc {
    pub fn document(&self) -> &Value {
        &self.document
    }

    pub fn fields(&self) -> &[MetricField] {
        &self.fields
    }

    /// Full validation: every field present with the exact JSON type, nothing
    /// extra. Values are returned in schema field order.
    pub fn validate(&self, candidate: &Value) -> Result<Map<String, Value>, SchemaViolation> {
        let object = candidate.as_object().ok_or(SchemaViolation::NotAnObject)?;
        let mut values = Map::new();
        for field in &self.fields {
            let value = object
                .get(&field.name)
                .ok_or_else(|| SchemaViolation::MissingField {
                    field: field.name.clone(),
                })?;
            if !type_matches(field.value_type, value) {
                return Err(SchemaViolation::TypeMismatch {
                    field: field.name.clone(),
                    expected: json_type_name(field.value_type),
                });
            }
            values.insert(field.name.clone(), value.clone());
        }
        for key in object.keys() {
            if !self.fields.iter().any(|f| &f.name == key) {
                return Err(SchemaViolation::UnknownField { field: key.clone() });
            }
        }
        Ok(values)
    }
}

fn json_type_name(field_type: FieldType) -> &'static str {
    match field_type {
        FieldType::Int => "integer",
        FieldType::Float => "number",
        FieldType::Str => "string",
        FieldType::Bool => "boolean",
    }
}

fn type_matches(field_type: FieldType, value: &Value) -> bool {
    match field_type {
        // Strict: 4 is an integer, 4.0 and "4" are not.
        FieldType::Int => value.is_i64() || value.is_u64(),
        FieldType::Float => value.is_number(),
        FieldType::Str => value.is_string(),
        FieldType::Bool => value.is_boolean(),
    }
}

/// Builds the schema document for a metric field list.
pub fn schema_from_format(fields: &[MetricField]) -> Result<SchemaDoc, JudgeError> {
    if fields.is_empty() {
        return Err(JudgeError::EmptyFormat);
    }
    let mut properties = Map::new();
    let mut required = Vec::with_capacity(fields.len());
    for field in fields {
        if properties.contains_key(&field.name) {
            return Err(JudgeError::DuplicateField(field.name.clone()));
        }
        let mut prop = Map::new();
        prop.insert(
            "type".into(),
            Value::String(json_type_name(field.value_type).into()),
        );
        prop.insert(
            "description".into(),
            Value::String(field.description.clone()),
        );
        properties.insert(field.name.clone(), Value::Object(prop));
        required.push(Value::String(field.name.clone()));
    }
    let mut document = Map::new();
    document.insert("type".into(), Value::String("object".into()));
    document.insert("properties".into(), Value::Object(properties));
    document.insert("required".into(), Value::Array(required));
    document.insert("additionalProperties".into(), Value::Bool(false));
    Ok(SchemaDoc {
        document: Value::Object(document),
        fields: fields.to_vec(),
    })
}

/// Extracts every brace-balanced JSON object from the text, string-aware so
/// braces inside string literals do not confuse the scan. Candidates are
/// returned in document order.
fn json_candidates(text: &str) -> Vec<Value> {
    let bytes = text.as_bytes();
    let mut candidates = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        let mut end = None;
        for (offset, &b) in bytes[i..].iter().enumerate() {
            if in_string {
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == b'"' {
                    in_string = false;
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(i + offset + 1);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end {
            Some(end) => {
                if let Ok(value) = serde_json::from_str::<Value>(&text[i..end]) {
                    candidates.push(value);
                    i = end;
                } else {
                    i += 1;
                }
            }
            None => break,
        }
    }
    candidates
}

/// Scans the reply for JSON candidates and returns the LAST one that
/// validates against the schema. Types must match exactly; numeric strings
/// are not coerced.
pub fn extract_structured(
    reply_text: &str,
    schema: &SchemaDoc,
) -> Result<Map<String, Value>, ExtractError> {
    let candidates = json_candidates(reply_text);
    if candidates.is_empty() {
        return Err(ExtractError::NoJsonFound);
    }
    let mut last_valid = None;
    let mut last_violation = None;
    for candidate in &candidates {
        match schema.validate(candidate) {
            Ok(values) => last_valid = Some(values),
            Err(violation) => last_violation = Some(violation),
        }
    }
    match (last_valid, last_violation) {
        (Some(values), _) => Ok(values),
        (None, Some(violation)) => Err(ExtractError::SchemaInvalid { violation }),
        (None, None) => Err(ExtractError::NoJsonFound),
    }
}

fn synthetic_example(fields: &[MetricField]) -> Value {
    let mut example = Map::new();
    for field in fields {
        let value = match field.value_type {
            FieldType::Int => Value::from(3),
            FieldType::Float => Value::from(3.5),
            FieldType::Str => Value::from("example"),
            FieldType::Bool => Value::from(true),
        };
        example.insert(field.name.clone(), value);
    }
    Value::Object(example)
}

/// Typed scores produced by one judge pass over one case.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationResult {
    pub case_id: String,
    pub evaluator: String,
    pub values: Map<String, Value>,
    pub raw_reply: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct JudgeOptions {
    /// Judge transcripts that ended in an error.
    pub allow_partial: bool,
    /// Model calls before giving up on extraction failures.
    pub max_attempts: u32,
}

impl Default for JudgeOptions {
    fn default() -> Self {
        Self {
            allow_partial: false,
            max_attempts: 3,
        }
    }
}

fn likert_check(values: &Map<String, Value>, fields: &[MetricField]) -> Result<(), JudgeError> {
    for field in fields {
        if field.value_type != FieldType::Int {
            continue;
        }
        let value = values[&field.name]
            .as_i64()
            .expect("validated integer field");
        if !(LIKERT_MIN..=LIKERT_MAX).contains(&value) {
            return Err(JudgeError::LikertOutOfRange {
                field: field.name.clone(),
                value,
            });
        }
    }
    Ok(())
}

/// Scores one complete dialogue with the configured evaluator model.
///
/// Prompt mode appends the schema plus a synthetic example to the final
/// prompt message and parses the reply; tool mode declares the schema as a
/// callable function and reads the returned arguments. Extraction failures
/// retry the model call up to `options.max_attempts` times.
pub async fn evaluate_case(
    spec: &EvaluationSpec,
    record: &DialogueRecord,
    case: &TestCase,
    model: &ModelConfig,
    session: &GatewaySession,
    options: &JudgeOptions,
) -> Result<EvaluationResult, JudgeError> {
    if record.termination == Termination::Error && !options.allow_partial {
        return Err(JudgeError::RecordNotJudgeable(record.case_id.clone()));
    }
    let schema = schema_from_format(&spec.format)?;

    let dialog = template::as_dialog(
        record
            .messages
            .iter()
            .map(|m| (m.agent.as_str(), m.content.as_str())),
    );
    let ctx = RenderContext::with_bindings(&case.bindings).dialog(dialog);
    let mut messages: Vec<Message> = Vec::with_capacity(spec.prompt.len() + 1);
    for prompt in &spec.prompt {
        messages.push(template::render_template(prompt, &ctx)?);
    }

    let mut request = ChatRequest::new(model, messages);
    match spec.format_mode {
        crate::config::FormatMode::Prompt => {
            let suffix = format!(
                "\n\nReturn exactly one JSON object matching this JSON Schema, inside a fenced code block:\n```json\n{}\n```\nExample of the expected shape:\n```json\n{}\n```",
                serde_json::to_string_pretty(schema.document()).expect("schema serializes"),
                serde_json::to_string_pretty(&synthetic_example(schema.fields()))
                    .expect("example serializes"),
            );
            match request.messages.last_mut() {
                Some(last) => last.content.push_str(&suffix),
                None => request
                    .messages
                    .push(Message::new(Role::User, suffix.trim_start().to_string())),
            }
        }
        crate::config::FormatMode::Tool => {
            request.tools.push(ToolDecl {
                name: "record_scores".into(),
                description: "Record one value per rubric field for this dialogue.".into(),
                parameters: schema.document().clone(),
            });
        }
    }

    let mut last_error: Option<JudgeError> = None;
    for attempt in 1..=options.max_attempts {
        let completion = session.chat_with_default_retry(&request).await?;
        let outcome: Result<(Map<String, Value>, String), JudgeError> = match spec.format_mode {
            crate::config::FormatMode::Prompt => extract_structured(&completion.text, &schema)
                .map(|values| (values, completion.text.clone()))
                .map_err(JudgeError::from),
            crate::config::FormatMode::Tool => match &completion.tool_call {
                Some(call) => schema
                    .validate(&call.arguments)
                    .map(|values| (values, call.arguments.to_string()))
                    .map_err(|violation| {
                        JudgeError::Extraction(ExtractError::SchemaInvalid { violation })
                    }),
                None => Err(JudgeError::NoToolCall),
            },
        };
        match outcome {
            Ok((values, raw_reply)) => {
                likert_check(&values, schema.fields())?;
                return Ok(EvaluationResult {
                    case_id: record.case_id.clone(),
                    evaluator: spec.name.clone(),
                    values,
                    raw_reply,
                    attempts: attempt,
                });
            }
            Err(err) => last_error = Some(err),
        }
    }
    Err(JudgeError::RetriesExhausted {
        attempts: options.max_attempts,
        last: last_error
            .map(|e| e.to_string())
            .unwrap_or_else(|| "no attempts made".into()),
    })
}

/// Character and whitespace-token counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LengthStats {
    pub chars: usize,
    pub tokens: usize,
}

impl LengthStats {
    fn add(&mut self, text: &str) {
        self.chars += text.chars().count();
        self.tokens += text.split_whitespace().count();
    }
}

/// Rule-based metrics over one transcript.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectiveReport {
    pub keyword_hits: BTreeMap<String, usize>,
    pub per_agent_length: BTreeMap<String, LengthStats>,
    pub total_length: LengthStats,
}

/// Case-folded substring occurrence counts over the whole transcript plus
/// response lengths per agent and in total.
pub fn objective_metrics(record: &DialogueRecord, keywords: &[String]) -> ObjectiveReport {
    let mut report = ObjectiveReport::default();
    for keyword in keywords {
        report.keyword_hits.insert(keyword.clone(), 0);
    }
    for message in &record.messages {
        let folded = message.content.to_lowercase();
        for keyword in keywords {
            let needle = keyword.to_lowercase();
            if needle.is_empty() {
                continue;
            }
            *report.keyword_hits.get_mut(keyword).expect("pre-seeded") +=
                folded.matches(&needle).count();
        }
        report
            .per_agent_length
            .entry(message.agent.as_str().to_string())
            .or_default()
            .add(&message.content);
        report.total_length.add(&message.content);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Utc;

    fn int_field(name: &str) -> MetricField {
        MetricField {
            name: name.into(),
            value_type: FieldType::Int,
            description: format!("{name} description"),
        }
    }

    fn evaluation_box_fields() -> Vec<MetricField> {
        [
            "Accuracy",
            "Guidance",
            "Goal Alignment",
            "Personalization",
            "Metacognition",
            "Cultural Integration",
        ]
        .into_iter()
        .map(int_field)
        .collect()
    }

    #[test]
    fn schema_has_ordered_required_integer_properties() {
        let schema = schema_from_format(&evaluation_box_fields()).unwrap();
        let doc = schema.document();
        assert_eq!(doc["type"], "object");
        assert_eq!(doc["additionalProperties"], false);
        let properties = doc["properties"].as_object().unwrap();
        assert_eq!(properties.len(), 6);
        let keys: Vec<&String> = properties.keys().collect();
        assert_eq!(keys[0], "Accuracy");
        assert_eq!(keys[5], "Cultural Integration");
        for value in properties.values() {
            assert_eq!(value["type"], "integer");
        }
        assert_eq!(doc["required"].as_array().unwrap().len(), 6);
    }

    #[test]
    fn schema_rejects_empty_and_duplicates() {
        assert!(matches!(
            schema_from_format(&[]),
            Err(JudgeError::EmptyFormat)
        ));
        let fields = vec![int_field("A"), int_field("A")];
        assert!(matches!(
            schema_from_format(&fields),
            Err(JudgeError::DuplicateField(_))
        ));
    }

    #[test]
    fn schema_is_injective_on_field_lists() {
        let a = schema_from_format(&[int_field("A"), int_field("B")]).unwrap();
        let b = schema_from_format(&[int_field("B"), int_field("A")]).unwrap();
        let c = schema_from_format(&[
            MetricField {
                name: "A".into(),
                value_type: FieldType::Float,
                description: "A description".into(),
            },
            int_field("B"),
        ])
        .unwrap();
        assert_ne!(a.document().to_string(), b.document().to_string());
        assert_ne!(a.document().to_string(), c.document().to_string());
        let again = schema_from_format(&[int_field("A"), int_field("B")]).unwrap();
        assert_eq!(a.document().to_string(), again.document().to_string());
    }

    #[test]
    fn schema_single_bool_field() {
        let fields = vec![MetricField {
            name: "passed".into(),
            value_type: FieldType::Bool,
            description: String::new(),
        }];
        let schema = schema_from_format(&fields).unwrap();
        assert_eq!(schema.document()["properties"]["passed"]["type"], "boolean");
        assert_eq!(schema.document()["required"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn extracts_fenced_block() {
        let schema = schema_from_format(&evaluation_box_fields()).unwrap();
        let reply = "Here are my scores.\n```json\n{\"Accuracy\":4,\"Guidance\":5,\"Goal Alignment\":3,\"Personalization\":4,\"Metacognition\":2,\"Cultural Integration\":1}\n```\nDone.";
        let values = extract_structured(reply, &schema).unwrap();
        assert_eq!(values["Accuracy"], 4);
        assert_eq!(values.len(), 6);
    }

    #[test]
    fn prose_only_reports_no_json() {
        let schema = schema_from_format(&evaluation_box_fields()).unwrap();
        assert_eq!(
            extract_structured("great lesson, would watch again", &schema).unwrap_err(),
            ExtractError::NoJsonFound
        );
    }

    #[test]
    fn last_valid_candidate_wins() {
        let schema = schema_from_format(&[int_field("A")]).unwrap();
        let reply = "draft: {\"A\": \"not an int\"} final: {\"A\": 2} revised: {\"A\": 5}";
        let values = extract_structured(reply, &schema).unwrap();
        assert_eq!(values["A"], 5);
    }

    #[test]
    fn invalid_then_valid_succeeds() {
        let schema = schema_from_format(&[int_field("A")]).unwrap();
        let reply = "{\"B\": 1} then {\"A\": 3}";
        assert_eq!(extract_structured(reply, &schema).unwrap()["A"], 3);
    }

    #[test]
    fn schema_invalid_names_first_violation() {
        let schema = schema_from_format(&evaluation_box_fields()).unwrap();
        let reply = "{\"Accuracy\": 4}";
        match extract_structured(reply, &schema).unwrap_err() {
            ExtractError::SchemaInvalid {
                violation: SchemaViolation::MissingField { field },
            } => assert_eq!(field, "Guidance"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn numeric_strings_are_not_coerced() {
        let schema = schema_from_format(&[int_field("A")]).unwrap();
        let err = extract_structured("{\"A\": \"4\"}", &schema).unwrap_err();
        assert!(matches!(
            err,
            ExtractError::SchemaInvalid {
                violation: SchemaViolation::TypeMismatch { .. }
            }
        ));
        // A float is not an integer either.
        let err = extract_structured("{\"A\": 4.0}", &schema).unwrap_err();
        assert!(matches!(err, ExtractError::SchemaInvalid { .. }));
    }

    #[test]
    fn braces_inside_strings_do_not_break_the_scan() {
        let schema = schema_from_format(&[MetricField {
            name: "note".into(),
            value_type: FieldType::Str,
            description: String::new(),
        }])
        .unwrap();
        let reply = "{\"note\": \"uses { and } inside\"}";
        assert_eq!(
            extract_structured(reply, &schema).unwrap()["note"],
            "uses { and } inside"
        );
    }

    #[test]
    fn objective_metrics_counts_keywords_and_lengths() {
        let record = DialogueRecord {
            case_id: "c".into(),
            messages: vec![
                crate::orchestrator::AttributedMessage {
                    case_id: "c".into(),
                    seq: 0,
                    agent: "teacher".into(),
                    role: Role::Assistant,
                    content: "Great work today, CLASS OVER!".into(),
                    created_at: Utc::now(),
                },
                crate::orchestrator::AttributedMessage {
                    case_id: "c".into(),
                    seq: 1,
                    agent: "student".into(),
                    role: Role::Assistant,
                    content: "bye".into(),
                    created_at: Utc::now(),
                },
            ],
            termination: Termination::RouterEnd,
            error_detail: None,
        };
        let report = objective_metrics(&record, &["class over".to_string()]);
        assert_eq!(report.keyword_hits["class over"], 1);
        assert_eq!(report.per_agent_length.len(), 2);
        assert_eq!(report.per_agent_length["student"].tokens, 1);
        assert_eq!(
            report.total_length.chars,
            "Great work today, CLASS OVER!".chars().count() + 3
        );

        let empty = objective_metrics(&record, &[]);
        assert!(empty.keyword_hits.is_empty());
        assert_eq!(empty.per_agent_length.len(), 2);
    }
}
