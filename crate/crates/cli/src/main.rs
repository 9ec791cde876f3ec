//! `harmonize`: dataset synthesis, training, evaluation and single-image harmonization.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "harmonize",
    version,
    about = "Foreground-aware image harmonization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic desk-scale dataset in the iHarmony4 layout.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset, per foreground-ratio bucket.
    Eval(EvalArgs),
    /// Harmonize one composite image.
    Harmonize(HarmonizeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Side length in pixels.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(16..))]
    pub size: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Mse,
    #[value(name = "fn_mse", alias = "fn-mse")]
    FnMse,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root (real_images/, masks/, composite_images/).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for config, history and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config with dotted keys, or a previous run manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set architecture.base_width=8`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = config::parse_assignment)]
    pub set: Vec<(String, serde_json::Value)>,
    /// Continue from a checkpoint; its stored config is used unchanged.
    #[arg(long, conflicts_with_all = ["config", "set", "epochs", "batch_size", "lr", "seed", "size",
        "width", "depth", "holdout", "checkpoint_every", "features", "no_hflip", "no_rrc", "loss",
        "no_blend", "blind_backbone"])]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model input side; also the augmentation output size.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Directory of `.hfeat` backbone features; selects the precomputed backbone.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub no_hflip: bool,
    #[arg(long)]
    pub no_rrc: bool,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Predict the image directly instead of blending with the input.
    #[arg(long)]
    pub no_blend: bool,
    /// Drop the mask branch from the backbone stem.
    #[arg(long)]
    pub blind_backbone: bool,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Holdout,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for report.json, report.txt and the run manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Which part of the dataset to score, using the checkpoint's holdout fraction.
    #[arg(long, value_enum, default_value_t = Split::All)]
    pub split: Split,
    /// Feature directory for a precomputed-backbone checkpoint.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HarmonizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub composite: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the predicted attention mask as a grayscale PNG.
    #[arg(long)]
    pub attention: Option<PathBuf>,
    /// `.hfeat` file for a precomputed-backbone checkpoint.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Run manifest path; defaults to `<out>.run.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result: Result<(), CliError> = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Harmonize(a) => commands::harmonize(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
