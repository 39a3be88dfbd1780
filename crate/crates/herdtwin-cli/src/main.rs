//! Stage-by-stage and end-to-end front end for the herdtwin toolkit.
//!
//! Every run prints exactly one JSON summary line to stdout. Exit codes:
//! 0 success, 2 usage (clap), 3 data problems, 4 numerical failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod pipeline;
mod stages;

use herdtwin_core::fit::FitError;
use herdtwin_core::lstm::LstmError;
use herdtwin_core::twin::TwinError;
use stages::Ctx;

/// Nonzero-exit categories. Usage errors never reach this type: clap exits 2
/// on its own before a command runs.
#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl StageError {
    fn category(&self) -> &'static str {
        match self {
            StageError::Data(_) => "data",
            StageError::Numerical(_) => "numerical",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            StageError::Data(_) => 3,
            StageError::Numerical(_) => 4,
        }
    }
}

impl From<std::io::Error> for StageError {
    fn from(e: std::io::Error) -> Self {
        StageError::Data(format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for StageError {
    fn from(e: serde_json::Error) -> Self {
        StageError::Data(format!("json: {e}"))
    }
}

impl From<herdtwin_core::model::ModelError> for StageError {
    fn from(e: herdtwin_core::model::ModelError) -> Self {
        StageError::Data(e.to_string())
    }
}

impl From<herdtwin_core::ingest::IngestError> for StageError {
    fn from(e: herdtwin_core::ingest::IngestError) -> Self {
        StageError::Data(e.to_string())
    }
}

impl From<herdtwin_core::synth::SynthError> for StageError {
    fn from(e: herdtwin_core::synth::SynthError) -> Self {
        StageError::Data(e.to_string())
    }
}

impl From<herdtwin_core::aggregate::AggregateError> for StageError {
    fn from(e: herdtwin_core::aggregate::AggregateError) -> Self {
        StageError::Data(e.to_string())
    }
}

impl From<herdtwin_core::filter::FilterError> for StageError {
    fn from(e: herdtwin_core::filter::FilterError) -> Self {
        StageError::Data(e.to_string())
    }
}

impl From<FitError> for StageError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::SingularSystem => StageError::Numerical(e.to_string()),
            other => StageError::Data(other.to_string()),
        }
    }
}

impl From<LstmError> for StageError {
    fn from(e: LstmError) -> Self {
        match e {
            LstmError::NonFiniteLoss { .. } => StageError::Numerical(e.to_string()),
            other => StageError::Data(other.to_string()),
        }
    }
}

impl From<TwinError> for StageError {
    fn from(e: TwinError) -> Self {
        match e {
            TwinError::Lstm(LstmError::NonFiniteLoss { .. }) => {
                StageError::Numerical(e.to_string())
            }
            other => StageError::Data(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "herdtwin", version, about = "Cattle behavior digital-twin toolkit")]
struct Cli {
    /// Output directory; every artifact this run writes lands inside it.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// JSON config file for the subcommand; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed override (falls back to $HERDTWIN_SEED, then defaults).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for intra-stage parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic herd: sensor CSV plus per-hour ground truth.
    Synth(stages::SynthArgs),
    /// Validate and load a sensor CSV; write the cohort census.
    Ingest(stages::IngestArgs),
    /// Hourly state budgets, cohort averages, and daily profiles.
    Aggregate(stages::AggregateArgs),
    /// FIR low-pass an hourly series.
    Filter(stages::FilterArgs),
    /// Fit curve families to a daily profile and rank them.
    Fit(stages::FitArgs),
    /// Train the LSTM on an hourly series; write checkpoint and trace.
    Train(stages::TrainArgs),
    /// Predict the next 24-hour cycle from a checkpoint.
    Predict(stages::PredictArgs),
    /// One-axis hyperparameter sweep with repeated seeded runs.
    Sweep(stages::SweepArgs),
    /// Digital-twin registry operations.
    Twin {
        #[command(subcommand)]
        action: stages::TwinAction,
    },
    /// Rank treatments by activity deficit and export the report.
    Report(stages::ReportArgs),
    /// Run synth through report end to end and write a digest manifest.
    Pipeline(pipeline::PipelineArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Aggregate(_) => "aggregate",
            Command::Filter(_) => "filter",
            Command::Fit(_) => "fit",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Sweep(_) => "sweep",
            Command::Twin { .. } => "twin",
            Command::Report(_) => "report",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

fn run(ctx: &Ctx, command: Command) -> Result<serde_json::Value, StageError> {
    match command {
        Command::Synth(args) => stages::run_synth(ctx, args),
        Command::Ingest(args) => stages::run_ingest(ctx, args),
        Command::Aggregate(args) => stages::run_aggregate(ctx, args),
        Command::Filter(args) => stages::run_filter(ctx, args),
        Command::Fit(args) => stages::run_fit(ctx, args),
        Command::Train(args) => stages::run_train(ctx, args),
        Command::Predict(args) => stages::run_predict(ctx, args),
        Command::Sweep(args) => stages::run_sweep(ctx, args),
        Command::Twin { action } => stages::run_twin(ctx, action),
        Command::Report(args) => stages::run_report(ctx, args),
        Command::Pipeline(args) => pipeline::run_pipeline(ctx, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // A second pool build in-process is harmless to ignore.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let seed_env = std::env::var("HERDTWIN_SEED").ok().and_then(|s| s.parse().ok());
    let ctx = Ctx {
        out: cli.out,
        config: cli.config,
        seed_flag: cli.seed,
        seed_env,
    };
    let name = cli.command.name();
    match run(&ctx, cli.command) {
        Ok(mut summary) => {
            if let Some(obj) = summary.as_object_mut() {
                obj.insert("command".into(), name.into());
                obj.insert("status".into(), "ok".into());
            }
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({
                "command": name,
                "status": "error",
                "category": e.category(),
                "message": e.to_string(),
            });
            println!("{line}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
