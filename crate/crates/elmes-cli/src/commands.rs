//! Implementations behind the CLI verbs; each returns typed results so
//! integration tests can drive them in-process.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use elmes_core::config::{ExperimentConfig, TestCase};
use elmes_core::judge::{self, JudgeOptions};
use elmes_core::orchestrator::{self, RunSummary};
use elmes_core::report::{self, ReportTable};
use elmes_core::store::{self, CaseState, RunStore};
use elmes_core::{gateway::Gateway, graph};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::{CliError, DrawArgs, EvalArgs, ExportArgs, ExportFormat, GenerateArgs, VisualizeArgs};

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    elmes_core::parse_config(&text).map_err(|e| CliError::Config(e.to_string()))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn db_path(out: &Path, run_name: &str) -> PathBuf {
    out.join(format!("{run_name}.db"))
}

fn open_store(out: &Path, run_name: &str, must_exist: bool) -> Result<RunStore, CliError> {
    let path = db_path(out, run_name);
    if must_exist && !path.exists() {
        return Err(CliError::Runtime(format!(
            "run database {} not found; run `elmes generate` first",
            path.display()
        )));
    }
    store::open_run(&path, run_name).map_err(|e| CliError::Runtime(e.to_string()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn build_gateway(concurrency: u32) -> Arc<Gateway> {
    Arc::new(Gateway::builder().concurrency(concurrency as usize).build())
}

pub async fn generate(args: &GenerateArgs) -> Result<RunSummary, CliError> {
    let mut config = load_config(&args.config)?;
    if let Some(concurrency) = args.concurrency {
        config.limits.concurrency = concurrency.max(1);
    }
    if let Some(max_turns) = args.max_turns {
        config.limits.max_turns = max_turns.max(1);
    }
    ensure_dir(&args.out)?;
    let path = db_path(&args.out, &config.evaluation.name);
    if args.fresh {
        for suffix in ["", "-wal", "-shm"] {
            let candidate = PathBuf::from(format!("{}{suffix}", path.display()));
            if candidate.exists() {
                std::fs::remove_file(&candidate).map_err(|e| {
                    CliError::Runtime(format!("cannot remove {}: {e}", candidate.display()))
                })?;
            }
        }
    }
    let store = open_store(&args.out, &config.evaluation.name, false)?;
    let cases = config
        .expand_tasks()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let gateway = build_gateway(config.limits.concurrency);
    orchestrator::run_all(&cases, &config, &store, &gateway)
        .await
        .map_err(|e| CliError::Runtime(e.to_string()))
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub judged: usize,
    pub skipped: usize,
    pub failures: Vec<(String, String)>,
    pub report_path: PathBuf,
    pub gateway_calls: u64,
}

pub async fn eval(args: &EvalArgs) -> Result<EvalOutcome, CliError> {
    let mut config = load_config(&args.config)?;
    if let Some(concurrency) = args.concurrency {
        config.limits.concurrency = concurrency.max(1);
    }
    let store = open_store(&args.out, &config.evaluation.name, true)?;
    let spec = config.evaluation.clone();
    let model = config
        .model(&spec.model)
        .expect("config validation resolves the evaluation model")
        .clone();

    let already = store
        .evaluated_case_ids(&spec.name)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let statuses = store
        .statuses()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut todo: Vec<String> = Vec::new();
    let mut skipped = 0usize;
    for status in statuses {
        let judgeable = status.status == CaseState::Complete
            || (args.allow_partial && status.status == CaseState::Failed);
        if !judgeable {
            continue;
        }
        if already.contains(&status.case_id) {
            skipped += 1;
        } else {
            todo.push(status.case_id);
        }
    }

    let gateway = build_gateway(config.limits.concurrency);
    let calls_before = gateway.total_calls();
    let options = JudgeOptions {
        allow_partial: args.allow_partial,
        ..JudgeOptions::default()
    };
    let semaphore = Arc::new(Semaphore::new(config.limits.concurrency as usize));
    let mut join_set = JoinSet::new();
    for case_id in todo {
        let store = store.clone();
        let spec = spec.clone();
        let model = model.clone();
        let gateway = Arc::clone(&gateway);
        let semaphore = Arc::clone(&semaphore);
        join_set.spawn(async move {
            let _permit = semaphore.acquire_owned().await.expect("semaphore open");
            let outcome = async {
                let record = store
                    .record(&case_id)
                    .map_err(|e| e.to_string())?
                    .ok_or_else(|| format!("case '{case_id}' has no persisted record"))?;
                let bindings = store.bindings(&case_id).map_err(|e| e.to_string())?;
                let case = TestCase {
                    case_id: case_id.clone(),
                    bindings,
                };
                let session = gateway.session();
                let result =
                    judge::evaluate_case(&spec, &record, &case, &model, &session, &options)
                        .await
                        .map_err(|e| e.to_string())?;
                store
                    .insert_evaluation(&result)
                    .map_err(|e| e.to_string())?;
                Ok::<(), String>(())
            }
            .await;
            (case_id, outcome)
        });
    }

    let mut judged = 0usize;
    let mut failures = Vec::new();
    while let Some(joined) = join_set.join_next().await {
        let (case_id, outcome) = joined.expect("judge worker panicked");
        match outcome {
            Ok(()) => judged += 1,
            Err(message) => failures.push((case_id, message)),
        }
    }

    let report_path = write_report(&store, &config, &args.out)?;
    Ok(EvalOutcome {
        judged,
        skipped,
        failures,
        report_path,
        gateway_calls: gateway.total_calls() - calls_before,
    })
}

fn write_report(
    store: &RunStore,
    config: &ExperimentConfig,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let spec = &config.evaluation;
    let rows = store
        .evaluation_values(&spec.name)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let results: Vec<elmes_core::judge::EvaluationResult> = rows
        .into_iter()
        .map(|(case_id, values)| elmes_core::judge::EvaluationResult {
            case_id,
            evaluator: spec.name.clone(),
            values,
            raw_reply: String::new(),
            attempts: 0,
        })
        .collect();
    let mut table = ReportTable::new(report::numeric_field_names(&spec.format));
    // A rubric of only free-text fields has nothing to average; the report
    // stays header-only in that case.
    if !results.is_empty() && !table.fields.is_empty() {
        let row = report::aggregate(&spec.name, &results, &spec.format)
            .map_err(|e| CliError::Eval(e.to_string()))?;
        table.push(row);
    }
    let path = out.join(format!("{}_report.csv", spec.name));
    write_file(&path, &report::to_csv(&table))?;
    Ok(path)
}

pub fn export(args: &ExportArgs) -> Result<Vec<PathBuf>, CliError> {
    match &args.format {
        ExportFormat::Json { config, out } => {
            let config = load_config(config)?;
            ensure_dir(out)?;
            let store = open_store(out, &config.evaluation.name, true)?;
            let documents =
                store::export_json(&store).map_err(|e| CliError::Runtime(e.to_string()))?;
            let path = out.join(format!("{}_export.json", config.evaluation.name));
            let text = serde_json::to_string_pretty(&documents)
                .expect("export documents always serialize");
            write_file(&path, &text)?;
            Ok(vec![path])
        }
        ExportFormat::LabelStudio { config, out } => {
            let config = load_config(config)?;
            ensure_dir(out)?;
            let store = open_store(out, &config.evaluation.name, true)?;
            let (interface, data) = store::export_label_studio(&store, &config.evaluation)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let interface_path = out.join("label-studio.txt");
            let data_path = out.join("label-studio.json");
            write_file(&interface_path, &interface)?;
            write_file(
                &data_path,
                &serde_json::to_string_pretty(&data).expect("data document serializes"),
            )?;
            Ok(vec![interface_path, data_path])
        }
    }
}

#[derive(Debug)]
pub struct DrawOutcome {
    pub dot_path: PathBuf,
    pub image_path: Option<PathBuf>,
}

pub fn draw(args: &DrawArgs) -> Result<DrawOutcome, CliError> {
    let config = load_config(&args.config)?;
    let workflow = config
        .build_graph()
        .map_err(|e| CliError::Config(e.to_string()))?;
    ensure_dir(&args.out)?;
    let dot_path = args
        .out
        .join(format!("{}_workflow.dot", config.evaluation.name));
    write_file(&dot_path, &graph::to_dot(&workflow))?;

    let image_path = args
        .out
        .join(format!("{}_workflow.png", config.evaluation.name));
    let rendered = std::process::Command::new("dot")
        .arg("-Tpng")
        .arg(&dot_path)
        .arg("-o")
        .arg(&image_path)
        .status()
        .map(|status| status.success())
        .unwrap_or(false);
    Ok(DrawOutcome {
        dot_path,
        image_path: rendered.then_some(image_path),
    })
}

pub fn visualize(args: &VisualizeArgs) -> Result<Vec<PathBuf>, CliError> {
    let text = std::fs::read_to_string(&args.report)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.report.display())))?;
    let table = report::parse_csv(&text).map_err(|e| CliError::Eval(e.to_string()))?;
    if table.rows.is_empty() {
        return Err(CliError::Eval("report contains no rows to chart".into()));
    }
    let stem = args
        .report
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report");
    let run_name = stem.strip_suffix("_report").unwrap_or(stem);
    ensure_dir(&args.out)?;
    let mut written = Vec::new();
    for chart in report::emit_charts(run_name, &table) {
        let path = args.out.join(&chart.file_name);
        write_file(&path, &chart.svg)?;
        written.push(path);
    }
    Ok(written)
}
