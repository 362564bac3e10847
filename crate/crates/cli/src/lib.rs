//! The `stormnet` command line: dataset generation, training, search,
//! evaluation and explanation, each writing its artifacts into a directory.
//!
//! Exit codes: 0 success, 2 usage or incompatible inputs, 3 I/O or corrupt
//! files, 4 numeric failure.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Io(String),

    #[error("{0}")]
    Numeric(String),

    #[error(transparent)]
    Core(#[from] stormnet::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use stormnet::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Core(e) => match e {
                E::NonFinite(_) => EXIT_NUMERIC,
                E::Io(_) | E::Json(_) | E::Checksum(_) | E::Format(_) => EXIT_IO,
                _ => EXIT_USAGE,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stormnet", version, about = "Train and explain neural networks on synthetic storm imagery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset directory
    Generate(GenerateArgs),
    /// Train one model and score it on the validation split
    Train(TrainArgs),
    /// Random hyperparameter search
    Search(SearchArgs),
    /// Score a saved model on a split
    Eval(EvalArgs),
    /// Permutation importance or gradient attributions for a saved model
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON file with any of the settings below; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed (falls back to STORMNET_SEED, then 0)
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Target fraction of pixels with at least one flash
    #[arg(long)]
    pub pos_rate: Option<f64>,
}

/// Settings shared by `train` and `search`.
#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory written by `generate`
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// perceptron, mlp_eng, mlp_pix, cnn or unet
    #[arg(long)]
    pub model: Option<String>,
    /// cls, reg, seg_cls or seg_reg
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Augment training images with rotations, flips and noise
    #[arg(long)]
    pub augment: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// sgd, adam or rmsprop
    #[arg(long)]
    pub optimizer: Option<String>,
    /// bce, weighted_bce, mse or mae
    #[arg(long)]
    pub loss: Option<String>,
    /// Positive-class weight for weighted_bce
    #[arg(long)]
    pub pos_weight: Option<f64>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model file written by `train` or `search`
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// val or test
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub sweep_step: Option<f64>,
    /// image, pixel or image_sum (default: image for scalar models, pixel for maps)
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Backward permutation importance per channel
    Perm,
    /// Expected-gradients attributions
    Attr,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// val or test
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Random subsets scored by permutation importance
    #[arg(long)]
    pub resamples: Option<usize>,
    /// Images per permutation subset
    #[arg(long)]
    pub sample_size: Option<usize>,
    /// Also run the multi-pass elimination
    #[arg(long)]
    pub multi_pass: bool,
    /// Path points per attributed sample
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of split samples to attribute
    #[arg(long)]
    pub samples: Option<usize>,
    /// Training images used as the attribution baseline
    #[arg(long)]
    pub background: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Search(a) => commands::search(a),
        Command::Eval(a) => commands::eval(a),
        Command::Explain(a) => commands::explain(a),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main_exit_code() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
