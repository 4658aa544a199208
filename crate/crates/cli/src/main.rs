//! Command-line entry point. Exit codes: 0 success, 1 job failure, 2 usage or
//! configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

mod commands;

#[derive(Parser)]
#[command(
    name = "request-harness",
    version,
    about = "Reproducibility harness for self-described LLM classification algorithms"
)]
struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Harness configuration file.
    #[arg(long, short = 'c', default_value = "request.toml")]
    pub config: PathBuf,
    /// Overrides `run_set` from the config.
    #[arg(long)]
    pub run_set: Option<String>,
    /// Overrides `concurrency` from the config.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Answer only from the response cache; a miss is an error.
    #[arg(long)]
    pub offline: bool,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    /// statute, echr_binary, stock_window or reddit_class.
    #[arg(long)]
    pub format: String,
    /// Raw corpus file or directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub task_id: Option<String>,
    /// Statute catalog (JSON array of {label, title, description}).
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Class list for reddit_class, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    #[arg(long)]
    pub min_mentions: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub tickers: Option<Vec<String>>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub backend: String,
    #[arg(long)]
    pub task: String,
    /// Defaults to the name the matrix workflow uses for the same run.
    #[arg(long)]
    pub run_id: Option<String>,
    /// Process at most this many datapoints, leaving the run resumable.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize a raw corpus into a dataset directory.
    Import(ImportArgs),
    /// Run the task prompt over a task's dataset.
    RunTask(RunArgs),
    /// Elicit (or reuse) a backend's algorithm for a task.
    Elicit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        backend: String,
        #[arg(long)]
        task: String,
    },
    /// Execute a stored algorithm with the robustness prompt.
    RunRobustness {
        #[command(flatten)]
        run: RunArgs,
        /// Backend whose algorithm is executed; defaults to --backend.
        #[arg(long)]
        algorithm_from: Option<String>,
    },
    /// Full workflow for model pairs: task runs, algorithms, robustness runs,
    /// scores and tables.
    Matrix {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Exactly two backends; defaults to the pairs in the config.
        #[arg(long)]
        backend: Vec<String>,
        /// Restrict to these tasks.
        #[arg(long)]
        task: Vec<String>,
    },
    /// Recompute a matrix from completed run directories, without backend calls.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        task: String,
        #[arg(long)]
        reference: String,
        #[arg(long)]
        other: String,
    },
    /// Enumerate every prediction set over a small gold standard.
    Analyze {
        /// Gold labels, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        gold: Vec<String>,
        /// Binary {0,1} label space.
        #[arg(long, conflicts_with = "classes")]
        binary: bool,
        /// Multiclass label space, comma separated.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        /// Also count prediction sets tying this one on Macro-F1.
        #[arg(long, value_delimiter = ',')]
        reference: Option<Vec<String>>,
        /// Histogram CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render every matrix of the run set and the PerRR summary.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Format printed to stdout: markdown or csv.
        #[arg(long, default_value = "markdown")]
        format: String,
    },
    /// Check the configuration and everything it references.
    ValidateConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// A failure and the exit code it maps to.
pub enum Failure {
    Config(anyhow::Error),
    Job(anyhow::Error),
}

impl Failure {
    pub fn config(e: impl Into<anyhow::Error>) -> Self {
        Failure::Config(e.into())
    }

    pub fn job(e: impl Into<anyhow::Error>) -> Self {
        Failure::Job(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let default = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env("REQUEST_LOG").unwrap_or_else(|_| EnvFilter::new(default)),
        )
        .with_writer(std::io::stderr)
        .init();

    let result = match cli.command {
        Command::Import(args) => commands::import(args),
        Command::RunTask(args) => commands::run_task(args),
        Command::Elicit { cfg, backend, task } => commands::elicit(cfg, &backend, &task),
        Command::RunRobustness {
            run,
            algorithm_from,
        } => commands::run_robustness(run, algorithm_from),
        Command::Matrix { cfg, backend, task } => commands::matrix(cfg, &backend, &task),
        Command::Score {
            cfg,
            task,
            reference,
            other,
        } => commands::score(cfg, &task, &reference, &other),
        Command::Analyze {
            gold,
            binary,
            classes,
            reference,
            out,
        } => commands::analyze(&gold, binary, classes, reference, out),
        Command::Report { cfg, format } => commands::report(cfg, &format),
        Command::ValidateConfig { cfg } => commands::validate_config(cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
        Err(Failure::Job(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain, skipping causes the outer messages already quote.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}
