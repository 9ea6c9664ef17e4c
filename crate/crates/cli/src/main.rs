//! `decornet`: train, evaluate, predict, probe and sweep from the command line.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use decornet_core::data::{DataError, Partition};
use decornet_core::{DecorError, Error};

#[derive(Debug, Parser)]
#[command(name = "decornet", version, about = "Channel-decorrelated residual U-Net for CT infection segmentation")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network from a JSON config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one partition of the split.
    Eval(EvalArgs),
    /// Segment NIfTI volumes with a checkpoint.
    Predict(PredictArgs),
    /// Average the channel probability map of one encoder unit.
    Probe(ProbeArgs),
    /// Train every channel config with and without the decorrelation loss.
    Sweep(SweepArgs),
    /// Write a small synthetic NIfTI corpus and manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override such as `loss.lambda_decor=0.01` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, fixed-order execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split file; defaults to the one recorded for the checkpoint's run.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    partition: Partition,
    /// Overrides applied to the checkpoint's config snapshot.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    source: CheckpointArgs,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input NIfTI volume (repeatable).
    #[arg(long, required = true)]
    volume: Vec<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    source: CheckpointArgs,
    /// Encoder unit, 1 = shallowest.
    #[arg(long, default_value_t = decornet_core::experiments::DEFAULT_PROBE_LAYER)]
    layer: usize,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated widths of the five encoder units (repeatable).
    #[arg(long, required = true)]
    channels: Vec<String>,
    /// Comma-separated methods: baseline, decor, decov, ortho.
    #[arg(long, default_value = "baseline,decor")]
    methods: String,
    /// Run the cells concurrently.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    volumes: usize,
    #[arg(long, default_value_t = 4)]
    slices: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.25)]
    empty_probability: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Checkpoint(_) | Error::Model(_) => 2,
        Error::Data(DataError::DegenerateWindow { .. }) => 2,
        Error::Decor(DecorError::InvalidWeights(_)) => 2,
        Error::Data(_) | Error::Metrics(_) => 3,
        Error::NonFinite(_) | Error::Decor(DecorError::NonFinite { .. }) => 4,
        Error::Decor(_) | Error::Candle(_) | Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp_millis()
        .init();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Probe(a) => commands::probe(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
