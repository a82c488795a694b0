//! Shared test helpers: a programmable chat-completions stub server.

// Each integration-test binary compiles this module; not all of them use
// every helper.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

/// What the stub replies with for one request.
#[derive(Debug, Clone)]
pub enum StubStep {
    Text(String),
    Status(u16, String),
    ToolCall { name: String, arguments: String },
}

/// One recorded request: bearer token (if any) and the parsed JSON body.
#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub bearer: Option<String>,
    pub body: Value,
}

type Handler = dyn Fn(&Value) -> StubStep + Send + Sync;

#[derive(Clone)]
struct AppState {
    requests: Arc<Mutex<Vec<RecordedRequest>>>,
    handler: Arc<Handler>,
}

pub struct StubServer {
    pub base_url: String,
    pub requests: Arc<Mutex<Vec<RecordedRequest>>>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

impl StubServer {
    /// Serves each request through the given handler.
    pub async fn start_with<F>(handler: F) -> StubServer
    where
        F: Fn(&Value) -> StubStep + Send + Sync + 'static,
    {
        let requests = Arc::new(Mutex::new(Vec::new()));
        let state = AppState {
            requests: Arc::clone(&requests),
            handler: Arc::new(handler),
        };
        let app = Router::new()
            .route("/v1/chat/completions", post(serve))
            .with_state(state);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .expect("bind stub server");
        let addr = listener.local_addr().expect("stub server address");
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
                .expect("stub server run");
        });
        StubServer {
            base_url: format!("http://{addr}/v1"),
            requests,
            shutdown: Some(tx),
        }
    }

    /// Replays the steps in order; once exhausted, the last step repeats.
    pub async fn start_script(steps: Vec<StubStep>) -> StubServer {
        assert!(!steps.is_empty());
        let queue = Mutex::new(VecDeque::from(steps));
        Self::start_with(move |_| {
            let mut queue = queue.lock().expect("stub script lock");
            if queue.len() > 1 {
                queue.pop_front().expect("non-empty")
            } else {
                queue.front().expect("non-empty").clone()
            }
        })
        .await
    }

    pub fn recorded(&self) -> Vec<RecordedRequest> {
        self.requests.lock().expect("request log lock").clone()
    }
}

async fn serve(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> Response {
    let bearer = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::to_string);
    state
        .requests
        .lock()
        .expect("request log lock")
        .push(RecordedRequest {
            bearer,
            body: body.clone(),
        });
    match (state.handler)(&body) {
        StubStep::Text(text) => Json(json!({
            "id": "chatcmpl-stub",
            "object": "chat.completion",
            "created": 0,
            "model": body["model"],
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": "stop"
            }],
            "usage": {"prompt_tokens": 7, "completion_tokens": 5, "total_tokens": 12}
        }))
        .into_response(),
        StubStep::ToolCall { name, arguments } => Json(json!({
            "id": "chatcmpl-stub",
            "object": "chat.completion",
            "created": 0,
            "model": body["model"],
            "choices": [{
                "index": 0,
                "message": {
                    "role": "assistant",
                    "content": null,
                    "tool_calls": [{
                        "id": "call_0",
                        "type": "function",
                        "function": {"name": name, "arguments": arguments}
                    }]
                },
                "finish_reason": "tool_calls"
            }]
        }))
        .into_response(),
        StubStep::Status(code, message) => (
            StatusCode::from_u16(code).expect("valid status"),
            Json(json!({"error": {"message": message, "type": "stub_error"}})),
        )
            .into_response(),
    }
}
