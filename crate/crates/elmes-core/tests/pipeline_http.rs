//! Whole-pipeline run against a live stub endpoint: generation over HTTP,
//! then tool-mode judging, then aggregation.

mod common;

use std::sync::Arc;

use common::{StubServer, StubStep};
use elmes_core::config::{parse_config, TestCase};
use elmes_core::gateway::Gateway;
use elmes_core::judge::{evaluate_case, JudgeOptions};
use elmes_core::orchestrator::run_all;
use elmes_core::report::{aggregate, to_csv, ReportTable};
use elmes_core::store::open_run;

fn config_text(base_url: &str) -> String {
    format!(
        r#"
models:
  candidate:
    type: openai
    base_url: {base_url}
    model: candidate-model
  judge:
    type: openai
    base_url: {base_url}
    model: judge-model
    sampling:
      temperature: 0.0

agents:
  tutor:
    model: candidate
    prompt:
      - role: system
        content: "Explain {{topic}} simply."

tasks:
  start_prompt:
    role: user
    content: ""
  mode: union
  content:
    topic: ["fractions", "perimeter", "ratios"]

directions:
  - START -> tutor
  - tutor -> END

evaluation:
  model: judge
  name: http_pipeline
  prompt:
    - role: system
      content: "Rate the explanation of {{task.topic}}:\n{{messages.as_dialog()}}"
  format:
    - field: Clarity
      type: int
      description: clarity of the explanation
    - field: Depth
      type: int
      description: depth of coverage
  format_mode: tool

limits:
  max_turns: 3
  concurrency: 2
"#
    )
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_generate_then_tool_mode_eval() {
    // One endpoint serves both models: candidate requests get text, judge
    // requests (which declare tools) get a function call.
    let stub = StubServer::start_with(|body| {
        if body.get("tools").is_some() {
            StubStep::ToolCall {
                name: "record_scores".into(),
                arguments: "{\"Clarity\": 4, \"Depth\": 3}".into(),
            }
        } else {
            StubStep::Text("Here is a simple explanation.".into())
        }
    })
    .await;

    let config = parse_config(&config_text(&stub.base_url)).unwrap();
    let cases = config.expand_tasks().unwrap();
    assert_eq!(cases.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let store = open_run(&dir.path().join("run.db"), "http_pipeline").unwrap();
    let gateway = Arc::new(Gateway::builder().concurrency(2).build());
    let summary = run_all(&cases, &config, &store, &gateway).await.unwrap();
    assert_eq!(summary.completed, 3);
    assert_eq!(summary.failed, 0);

    let judge_model = config.model("judge").unwrap();
    let mut results = Vec::new();
    for case_id in store.complete_case_ids().unwrap() {
        let record = store.record(&case_id).unwrap().unwrap();
        let case = TestCase {
            bindings: store.bindings(&case_id).unwrap(),
            case_id,
        };
        let session = gateway.session();
        let result = evaluate_case(
            &config.evaluation,
            &record,
            &case,
            judge_model,
            &session,
            &JudgeOptions::default(),
        )
        .await
        .unwrap();
        assert_eq!(result.values["Clarity"], 4);
        store.insert_evaluation(&result).unwrap();
        results.push(result);
    }

    let row = aggregate("http_pipeline", &results, &config.evaluation.format).unwrap();
    let mut table = ReportTable::new(vec!["Clarity".into(), "Depth".into()]);
    table.push(row);
    let csv_text = to_csv(&table);
    assert!(csv_text.contains("http_pipeline,4.00,3.00,3.50"));

    // The judge requests carried the schema under the function-tool envelope.
    let judged: Vec<_> = stub
        .recorded()
        .into_iter()
        .filter(|r| r.body["model"] == "judge-model")
        .collect();
    assert_eq!(judged.len(), 3);
    for request in &judged {
        assert_eq!(request.body["temperature"], 0.0);
        let tool = &request.body["tools"][0]["function"];
        assert_eq!(tool["name"], "record_scores");
        assert_eq!(tool["parameters"]["required"].as_array().unwrap().len(), 2);
        let prompt = request.body["messages"][0]["content"].as_str().unwrap();
        assert!(prompt.contains("tutor: Here is a simple explanation."));
    }
}
