//! Command-line driver: runs pipeline stages against an output directory.
//!
//! Parameters come from an optional TOML config; flags override it. Set
//! `ANOMALY_PIPELINE_LOG` (e.g. `info`, `debug`) to control verbosity.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use traffic_anomaly::pipeline::{LabelMode, Pipeline, PipelineConfig, Stage};

#[derive(Debug, Parser)]
#[command(name = "anomaly-pipeline", version, about = "Early traffic anomaly detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory holding every stage's artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Directory with the five input CSVs instead of a simulated scenario.
    #[arg(long, global = true)]
    inputs: Option<PathBuf>,

    /// Seed for scenario generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Restrict modeling to one target segment.
    #[arg(long, global = true)]
    segment: Option<String>,

    /// Label matrix the detector learns from.
    #[arg(long, global = true)]
    labels: Option<LabelMode>,

    /// Input window length, in slots.
    #[arg(long, global = true)]
    lookback: Option<usize>,

    /// Number of predicted future slots.
    #[arg(long, global = true)]
    horizon: Option<usize>,

    /// Slots between consecutive windows.
    #[arg(long, global = true)]
    stride: Option<usize>,

    /// Study window start, HH:MM.
    #[arg(long, global = true)]
    study_start: Option<String>,

    /// Study window end (exclusive), HH:MM.
    #[arg(long, global = true)]
    study_end: Option<String>,

    /// Keep only Monday to Friday in the study window.
    #[arg(long, global = true)]
    weekdays_only: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic corridor scenario and its input CSVs.
    Simulate,
    /// Load and impute the input CSVs.
    Ingest,
    /// Compute per-segment feature channels.
    Featurize,
    /// Denoise reports and build anomaly labels.
    Label,
    /// Split days and check window contamination.
    Split,
    /// Train one detector per target segment.
    Train,
    /// Select epoch and alert threshold.
    Tune,
    /// Score the test partition.
    Evaluate,
    /// Aggregate results and plot tables.
    Report,
    /// Run every stage in order.
    All,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Simulate => Stage::Simulate,
            Command::Ingest => Stage::Ingest,
            Command::Featurize => Stage::Featurize,
            Command::Label => Stage::Label,
            Command::Split => Stage::Split,
            Command::Train => Stage::Train,
            Command::Tune => Stage::Tune,
            Command::Evaluate => Stage::Evaluate,
            Command::Report => Stage::Report,
            Command::All => return None,
        })
    }
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut c = match &cli.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = &cli.inputs {
        c.inputs = Some(v.clone());
    }
    if let Some(v) = cli.seed {
        c.seed = v;
    }
    if let Some(v) = &cli.segment {
        c.segment = Some(v.clone());
    }
    if let Some(v) = cli.labels {
        c.labels = v;
    }
    if let Some(v) = cli.lookback {
        c.window.lookback = v;
    }
    if let Some(v) = cli.horizon {
        c.window.horizon = v;
    }
    if let Some(v) = cli.stride {
        c.window.stride = v;
    }
    if let Some(v) = &cli.study_start {
        c.study.start = v.clone();
    }
    if let Some(v) = &cli.study_end {
        c.study.end = v.clone();
    }
    if cli.weekdays_only {
        c.study.weekdays_only = true;
    }
    Ok(c)
}

fn run(cli: &Cli) -> Result<()> {
    let config = build_config(cli)?;
    let pipeline = Pipeline::new(&config, &cli.out)?;
    match cli.command.stage() {
        Some(stage) => pipeline.run(stage)?,
        None => pipeline.run_all()?,
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ANOMALY_PIPELINE_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
