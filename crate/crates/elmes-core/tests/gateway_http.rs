//! Gateway behavior against a live stub endpoint speaking the
//! chat-completions wire format.

mod common;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use common::{StubServer, StubStep};
use elmes_core::config::{ApiKeyRef, Message, ModelConfig, Provider, Role, Sampling};
use elmes_core::gateway::{ChatRequest, Gateway, GatewayError, RetryPolicy, ToolDecl};
use serde_json::json;

fn http_model(base_url: &str, key: Option<&str>) -> ModelConfig {
    ModelConfig {
        id: "remote".into(),
        provider: Provider::OpenAiCompatible,
        base_url: Some(base_url.to_string()),
        api_key: key.map(ApiKeyRef::parse),
        model_name: "stub-model".into(),
        sampling: Some(Sampling {
            temperature: Some(0.25),
            max_tokens: Some(64),
        }),
        script: None,
    }
}

fn request(model: &ModelConfig) -> ChatRequest {
    ChatRequest::new(
        model,
        vec![
            Message::new(Role::System, "be terse"),
            Message::new(Role::User, "hello there"),
        ],
    )
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        base_delay: Duration::from_millis(1),
        max_delay: Duration::from_millis(2),
    }
}

#[tokio::test]
async fn wire_format_round_trip() {
    let stub = StubServer::start_script(vec![StubStep::Text("hi".into())]).await;
    let model = http_model(&stub.base_url, Some("sk-test-123"));
    let gateway = Arc::new(Gateway::builder().build());
    let completion = gateway.session().chat(&request(&model)).await.unwrap();

    assert_eq!(completion.text, "hi");
    assert_eq!(completion.usage.unwrap().total_tokens, 12);
    assert!(completion.tool_call.is_none());

    let recorded = stub.recorded();
    assert_eq!(recorded.len(), 1);
    let req = &recorded[0];
    assert_eq!(req.bearer.as_deref(), Some("sk-test-123"));
    assert_eq!(req.body["model"], "stub-model");
    assert_eq!(req.body["temperature"], 0.25);
    assert_eq!(req.body["max_tokens"], 64);
    let messages = req.body["messages"].as_array().unwrap();
    assert_eq!(messages.len(), 2);
    assert_eq!(
        messages[0],
        json!({"role": "system", "content": "be terse"})
    );
    assert_eq!(
        messages[1],
        json!({"role": "user", "content": "hello there"})
    );
    assert!(req.body.get("tools").is_none());
}

#[tokio::test]
async fn auth_failure_surfaces_status() {
    let stub = StubServer::start_script(vec![StubStep::Status(401, "bad key".into())]).await;
    let model = http_model(&stub.base_url, Some("sk-wrong"));
    let gateway = Arc::new(Gateway::builder().build());
    let err = gateway.session().chat(&request(&model)).await.unwrap_err();
    match err {
        GatewayError::Status { status, body, .. } => {
            assert_eq!(status, 401);
            assert!(body.contains("bad key"));
        }
        other => panic!("expected status error, got {other}"),
    }
}

#[tokio::test]
async fn function_tools_travel_the_standard_envelope() {
    let stub = StubServer::start_script(vec![StubStep::ToolCall {
        name: "record_scores".into(),
        arguments: "{\"Accuracy\": 4}".into(),
    }])
    .await;
    let model = http_model(&stub.base_url, None);
    let mut req = request(&model);
    req.tools.push(ToolDecl {
        name: "record_scores".into(),
        description: "record rubric scores".into(),
        parameters: json!({"type": "object", "properties": {"Accuracy": {"type": "integer"}}}),
    });
    let gateway = Arc::new(Gateway::builder().build());
    let completion = gateway.session().chat(&req).await.unwrap();

    assert!(completion.text.is_empty());
    let call = completion.tool_call.unwrap();
    assert_eq!(call.name, "record_scores");
    assert_eq!(call.arguments, json!({"Accuracy": 4}));

    let recorded = stub.recorded();
    let tools = recorded[0].body["tools"].as_array().unwrap();
    assert_eq!(tools.len(), 1);
    assert_eq!(tools[0]["type"], "function");
    assert_eq!(tools[0]["function"]["name"], "record_scores");
    assert!(tools[0]["function"]["parameters"].is_object());
    // No Authorization header when the model has no credential.
    assert!(recorded[0].bearer.is_none());
}

#[tokio::test]
async fn retry_recovers_after_5xx() {
    let stub = StubServer::start_script(vec![
        StubStep::Status(503, "overloaded".into()),
        StubStep::Status(503, "overloaded".into()),
        StubStep::Text("finally".into()),
    ])
    .await;
    let model = http_model(&stub.base_url, None);
    let gateway = Arc::new(Gateway::builder().build());
    let completion = gateway
        .session()
        .chat_with_retry(&request(&model), &fast_retry())
        .await
        .unwrap();
    assert_eq!(completion.text, "finally");
    assert_eq!(stub.recorded().len(), 3);
    assert_eq!(gateway.total_calls(), 3);
}

#[tokio::test]
async fn bad_request_is_not_retried() {
    let stub = StubServer::start_script(vec![
        StubStep::Status(400, "malformed".into()),
        StubStep::Text("never reached".into()),
    ])
    .await;
    let model = http_model(&stub.base_url, None);
    let gateway = Arc::new(Gateway::builder().build());
    let err = gateway
        .session()
        .chat_with_retry(&request(&model), &fast_retry())
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::Status { status: 400, .. }));
    assert_eq!(stub.recorded().len(), 1);
}

#[tokio::test]
async fn rate_limit_exhaustion_lists_attempts() {
    let stub = StubServer::start_script(vec![StubStep::Status(429, "slow down".into())]).await;
    let model = http_model(&stub.base_url, None);
    let gateway = Arc::new(Gateway::builder().build());
    let err = gateway
        .session()
        .chat_with_retry(&request(&model), &fast_retry())
        .await
        .unwrap_err();
    match err {
        GatewayError::Exhausted {
            attempts, causes, ..
        } => {
            assert_eq!(attempts, 3);
            assert!(causes.matches("429").count() >= 3, "{causes}");
        }
        other => panic!("expected exhaustion, got {other}"),
    }
}

#[tokio::test]
async fn missing_env_credential_fails_before_any_request() {
    let stub = StubServer::start_script(vec![StubStep::Text("unreached".into())]).await;
    let model = http_model(&stub.base_url, Some("env:ELMES_TEST_UNSET_KEY_VAR"));
    let gateway = Arc::new(Gateway::builder().build());
    let err = gateway.session().chat(&request(&model)).await.unwrap_err();
    match err {
        GatewayError::CredentialMissing { var, .. } => {
            assert_eq!(var, "ELMES_TEST_UNSET_KEY_VAR");
        }
        other => panic!("expected credential error, got {other}"),
    }
    assert!(stub.recorded().is_empty());
}

#[derive(Clone)]
struct BufferWriter(Arc<Mutex<Vec<u8>>>);

impl std::io::Write for BufferWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().expect("log buffer").extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl<'a> tracing_subscriber::fmt::MakeWriter<'a> for BufferWriter {
    type Writer = BufferWriter;

    fn make_writer(&'a self) -> Self::Writer {
        self.clone()
    }
}

#[tokio::test]
async fn api_key_material_never_reaches_logs() {
    // Process-wide capture; this binary installs exactly one subscriber.
    let buffer = Arc::new(Mutex::new(Vec::new()));
    let subscriber = tracing_subscriber::fmt()
        .with_max_level(tracing::Level::TRACE)
        .with_writer(BufferWriter(Arc::clone(&buffer)))
        .finish();
    tracing::subscriber::set_global_default(subscriber).expect("sole global subscriber");

    let secret = "sk-supersecret-do-not-log";
    let stub = StubServer::start_script(vec![
        StubStep::Status(503, "retry me".into()),
        StubStep::Text("ok".into()),
    ])
    .await;
    let model = http_model(&stub.base_url, Some(secret));
    let req = request(&model);
    // Debug formatting of requests and models is redacted too.
    assert!(!format!("{req:?}").contains(secret));
    let gateway = Arc::new(Gateway::builder().build());
    let completion = gateway
        .session()
        .chat_with_retry(&req, &fast_retry())
        .await
        .unwrap();
    assert_eq!(completion.text, "ok");

    let logs = String::from_utf8(buffer.lock().unwrap().clone()).unwrap();
    assert!(logs.contains("chat"), "expected gateway logs, got: {logs}");
    assert!(!logs.contains(secret), "secret leaked into logs");
}
