//! `elmes` command line: generate, eval, export, draw, visualize.

pub mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_EVAL: i32 = 4;

/// Categorized failure carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments (exit 2).
    Config(String),
    /// Runtime, gateway or storage failure (exit 3).
    Runtime(String),
    /// Evaluation or extraction failure (exit 4).
    Eval(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Eval(_) => EXIT_EVAL,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) | CliError::Eval(m) => m,
        }
    }

    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
            CliError::Eval(_) => "eval",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "elmes",
    version,
    about = "Simulate multi-agent educational dialogues and score them with an LLM judge"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Concurrently execute test cases and persist dialogue transcripts.
    Generate(GenerateArgs),
    /// Score completed dialogues and write the aggregated CSV report.
    Eval(EvalArgs),
    /// Export run data for analysis or annotation.
    Export(ExportArgs),
    /// Render the agent workflow as DOT (plus an image when a renderer exists).
    Draw(DrawArgs),
    /// Convert a report CSV into comparison charts.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Experiment configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override limits.concurrency from the config.
    #[arg(long)]
    pub concurrency: Option<u32>,
    /// Override limits.max_turns from the config.
    #[arg(long)]
    pub max_turns: Option<u32>,
    /// Output directory holding the run database.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Discard any existing run database instead of resuming.
    #[arg(long)]
    pub fresh: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory holding the run database; the report CSV lands here too.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub concurrency: Option<u32>,
    /// Also judge transcripts that terminated with an error.
    #[arg(long)]
    pub allow_partial: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(subcommand)]
    pub format: ExportFormat,
}

#[derive(Debug, Subcommand)]
pub enum ExportFormat {
    /// One JSON document per case.
    Json {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Label Studio interface (label-studio.txt) and data (label-studio.json).
    #[command(name = "label-studio")]
    LabelStudio {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct DrawArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    /// Report CSV produced by `elmes eval`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version through this path with code 0.
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("elmes: {} error: {}", e.category(), e.message());
            e.exit_code()
        }
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}

/// Runs one parsed verb, printing human-readable results to stdout.
pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate(args) => {
            let summary = runtime().block_on(commands::generate(&args))?;
            println!(
                "generate: {} completed, {} failed, {} skipped (peak in-flight {}, gateway calls {}, {:.2}s)",
                summary.completed,
                summary.failed,
                summary.skipped,
                summary.peak_in_flight,
                summary.gateway_calls,
                summary.wall_time.as_secs_f64()
            );
            if summary.failed > 0 {
                return Err(CliError::Runtime(format!(
                    "{} case(s) terminated with errors; re-run to retry them",
                    summary.failed
                )));
            }
            Ok(())
        }
        Command::Eval(args) => {
            let summary = runtime().block_on(commands::eval(&args))?;
            println!(
                "eval: {} judged, {} skipped, report written to {}",
                summary.judged,
                summary.skipped,
                summary.report_path.display()
            );
            if !summary.failures.is_empty() {
                for (case_id, message) in &summary.failures {
                    eprintln!("elmes: case {case_id}: {message}");
                }
                return Err(CliError::Eval(format!(
                    "{} case(s) could not be judged",
                    summary.failures.len()
                )));
            }
            Ok(())
        }
        Command::Export(args) => {
            let written = commands::export(&args)?;
            for path in written {
                println!("export: wrote {}", path.display());
            }
            Ok(())
        }
        Command::Draw(args) => {
            let outcome = commands::draw(&args)?;
            println!("draw: wrote {}", outcome.dot_path.display());
            match outcome.image_path {
                Some(path) => println!("draw: rendered {}", path.display()),
                None => println!("draw: no DOT renderer on PATH, skipped image rendering"),
            }
            Ok(())
        }
        Command::Visualize(args) => {
            let written = commands::visualize(&args)?;
            println!("visualize: wrote {} chart(s)", written.len());
            for path in &written {
                println!("visualize: wrote {}", path.display());
            }
            Ok(())
        }
    }
}
