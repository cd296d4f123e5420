//! `catunet`: synthesize data, train, evaluate, diagnose single images and
//! run the gradient verification suite.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
//! `CATU_LOG` (`error`, `warn`, `info`, `debug`) sets the log level.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

/// A flag or configuration value was rejected before any work started.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Wraps a validation failure so it exits with the usage code.
pub fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

#[derive(Parser, Debug)]
#[command(
    name = "catunet",
    version,
    about = "CAT-U-Net reconstruction-based diagnosis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a deterministic synthetic dataset.
    Synth(SynthArgs),
    /// Train on the positive images of a dataset.
    Train(TrainArgs),
    /// Diagnose every image of a dataset and report metrics.
    Evaluate(EvaluateArgs),
    /// Diagnose a single image.
    Diagnose(DiagnoseArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Dataset root to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 25)]
    pub n_pos: usize,
    #[arg(long, default_value_t = 25)]
    pub n_neg: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root; only `positive/` is used.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file with `[model]`, `[training]` and `[threshold]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model input side; images are resized to it.
    #[arg(long)]
    pub size: Option<usize>,
    /// Encoder levels.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Checkpoint path; the report and resolved config are written beside it.
    #[arg(long, default_value = "model.catu")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ThresholdArgs {
    /// Largest MSE score (0-255 scale) labelled positive.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Squared-error level marking a mask pixel; per-image Otsu when unset.
    #[arg(long)]
    pub pixel_threshold: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset root, or a plain directory of images scored unlabelled.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    /// Labelled dataset on which to pick the sample threshold.
    #[arg(long, conflicts_with = "threshold")]
    pub calibrate: Option<PathBuf>,
    /// Compute error masks and score them by Dice against `masks/`.
    #[arg(long)]
    pub masks: bool,
    /// Output directory for the report, confusion matrix, per-sample lines
    /// and masks.
    #[arg(long, default_value = "evaluation")]
    pub out: PathBuf,
    /// Metrics JSON path (default `<out>/metrics.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Worker threads for per-sample scoring.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Write the binary error mask here (PGM).
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale the named case's analytic gradient to simulate a broken
    /// backward pass.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CATU_LOG", "warn")).init();
    let cli = Cli::parse();
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Diagnose(_) => "diagnose",
        Command::Gradcheck(_) => "gradcheck",
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth::run(&a),
        Command::Train(a) => commands::train::run(&a),
        Command::Evaluate(a) => commands::evaluate::run(&a),
        Command::Diagnose(a) => commands::diagnose::run(&a),
        Command::Gradcheck(a) => commands::gradcheck::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<UsageError>() {
            Some(u) => {
                let mut cmd = Cli::command();
                cmd.build();
                let sub = cmd.find_subcommand_mut(name).expect("subcommand exists");
                sub.error(ErrorKind::ValueValidation, u).exit()
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
