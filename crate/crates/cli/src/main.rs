//! `oescn`: synthesise data, extract band features, train, evaluate,
//! run ablations and export attention weights.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oescn::ErrorCategory;

use config::Preset;

#[derive(Parser, Debug)]
#[command(name = "oescn", version, about = "Olfactory EEG band-attention classifier pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file and its manifest.
    Synth(SynthArgs),
    /// Compute Welch spectra and band combinations for every trial.
    Extract(ExtractArgs),
    /// Cross-validate one model variant.
    Train(TrainArgs),
    /// Score fold checkpoints on their validation trials.
    Evaluate(EvaluateArgs),
    /// Cross-validate all three variants on shared folds and seeds.
    Ablate(TrainArgs),
    /// Export the attention weights of a checkpoint for one trial.
    AttnDump(AttnDumpArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Signature family and default dimensions.
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub trials_per_class: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Samples per channel.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub rate: Option<f64>,
    /// Standard deviation of the white noise floor.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub subject: Option<String>,
    /// JSON config file; its "synth" section overrides the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset path; the manifest goes to `<out>.json`.
    #[arg(short, long)]
    pub out: PathBuf,
}

/// Trials to work on: a dataset file, or a preset synthesised in memory.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset file written by `synth`.
    #[arg(long, conflicts_with = "preset")]
    pub data: Option<PathBuf>,
    /// Synthesise this preset instead of reading a file.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Seed of the synthesised dataset.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated band window lengths in bins.
    #[arg(long, value_delimiter = ',')]
    pub window_lengths: Option<Vec<usize>>,
    /// Band increment in bins.
    #[arg(long)]
    pub increment: Option<usize>,
    /// JSON config file; its "model.bands" section sets the band generator.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// oescn, oescn_a1 or oescn_a2 (ignored by `ablate`).
    #[arg(long)]
    pub variant: Option<String>,
    /// Seed of initialisation, shuffling and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the fold plan.
    #[arg(long)]
    pub fold_seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Plain shuffled folds instead of class-stratified ones.
    #[arg(long)]
    pub no_stratify: bool,
    /// Print the training loss every this many epochs.
    #[arg(long)]
    pub report_every: Option<usize>,
    /// Attention softmax temperature (default √C).
    #[arg(long)]
    pub attention_scale: Option<f64>,
    /// Do not write per-fold checkpoints.
    #[arg(long)]
    pub no_checkpoints: bool,
    /// JSON config file with optional "model" and "train" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Fold checkpoints written by `train`.
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Score every trial rather than only the fold's validation trials.
    #[arg(long)]
    pub all: bool,
    #[arg(short, long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AttnDumpArgs {
    /// OESCN fold checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Trial index (default: first validation trial of the fold).
    #[arg(long)]
    pub trial: Option<usize>,
    #[arg(short, long, default_value = "out")]
    pub out: PathBuf,
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Extract(a) => commands::extract(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::AttnDump(a) => commands::attn_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error ({}): {e}", format!("{category:?}").to_lowercase());
            ExitCode::from(exit_code(category))
        }
    }
}
