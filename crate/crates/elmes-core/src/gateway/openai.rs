//! OpenAI-compatible chat-completions wire format.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ChatRequest, Completion, GatewayError, ToolCallPayload, Usage};
use crate::config::{ApiKeyRef, Role};

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tools: Option<Vec<WireTool<'a>>>,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireTool<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    function: WireFunction<'a>,
}

#[derive(Serialize)]
struct WireFunction<'a> {
    name: &'a str,
    description: &'a str,
    parameters: &'a serde_json::Value,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    tool_calls: Option<Vec<WireToolCall>>,
}

#[derive(Deserialize)]
struct WireToolCall {
    function: WireToolCallFunction,
}

#[derive(Deserialize)]
struct WireToolCallFunction {
    name: String,
    /// JSON-encoded argument object, per the wire format.
    arguments: String,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
    #[serde(default)]
    total_tokens: u64,
}

fn role_str(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

pub(super) async fn chat(
    http: &reqwest::Client,
    request: &ChatRequest,
) -> Result<Completion, GatewayError> {
    let model = &request.model;
    let base_url = model
        .base_url
        .as_deref()
        .ok_or_else(|| GatewayError::MissingBaseUrl {
            model: model.id.clone(),
        })?;
    let url = format!("{}/chat/completions", base_url.trim_end_matches('/'));

    let api_key = match &model.api_key {
        Some(key_ref) => match key_ref.resolve() {
            Some(key) => Some(key),
            None => {
                let var = match key_ref {
                    ApiKeyRef::Env(var) => var.clone(),
                    ApiKeyRef::Literal(_) => unreachable!("literal keys always resolve"),
                };
                return Err(GatewayError::CredentialMissing {
                    model: model.id.clone(),
                    var,
                });
            }
        },
        None => None,
    };

    let sampling = request.sampling.as_ref();
    let body = WireRequest {
        model: &model.model_name,
        messages: request
            .messages
            .iter()
            .map(|m| WireMessage {
                role: role_str(m.role),
                content: &m.content,
            })
            .collect(),
        temperature: sampling.and_then(|s| s.temperature),
        max_tokens: sampling.and_then(|s| s.max_tokens),
        tools: if request.tools.is_empty() {
            None
        } else {
            Some(
                request
                    .tools
                    .iter()
                    .map(|t| WireTool {
                        kind: "function",
                        function: WireFunction {
                            name: &t.name,
                            description: &t.description,
                            parameters: &t.parameters,
                        },
                    })
                    .collect(),
            )
        },
    };

    let started = Instant::now();
    let mut builder = http.post(&url).json(&body);
    if let Some(key) = &api_key {
        builder = builder.bearer_auth(key);
    }
    let response = builder.send().await.map_err(|e| GatewayError::Transport {
        model: model.id.clone(),
        message: e.to_string(),
    })?;

    let status = response.status();
    if !status.is_success() {
        let body = response.text().await.unwrap_or_default();
        let excerpt: String = body.chars().take(400).collect();
        return Err(GatewayError::Status {
            model: model.id.clone(),
            status: status.as_u16(),
            body: excerpt,
        });
    }

    let parsed: WireResponse =
        response
            .json()
            .await
            .map_err(|e| GatewayError::MalformedResponse {
                model: model.id.clone(),
                message: e.to_string(),
            })?;
    let latency = started.elapsed();

    let choice =
        parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::MalformedResponse {
                model: model.id.clone(),
                message: "response contained no choices".into(),
            })?;

    let tool_call = match choice.message.tool_calls.and_then(|mut v| {
        if v.is_empty() {
            None
        } else {
            Some(v.remove(0))
        }
    }) {
        Some(call) => {
            let arguments = serde_json::from_str(&call.function.arguments).map_err(|e| {
                GatewayError::MalformedResponse {
                    model: model.id.clone(),
                    message: format!("tool call arguments are not valid JSON: {e}"),
                }
            })?;
            Some(ToolCallPayload {
                name: call.function.name,
                arguments,
            })
        }
        None => None,
    };

    Ok(Completion {
        text: choice.message.content.unwrap_or_default(),
        tool_call,
        usage: parsed.usage.map(|u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
            total_tokens: u.total_tokens,
        }),
        latency,
    })
}
