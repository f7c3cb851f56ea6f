use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use fsq::ModelConfig;

#[derive(Debug, Parser)]
#[command(name = "fsq", version, about = "Train and run SqueezeNet fingerspelling classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a directory of class folders.
    Train(TrainArgs),
    /// Report accuracy of a checkpoint on a labelled directory.
    Eval(EvalArgs),
    /// Classify a single image.
    Predict(PredictArgs),
    /// Print the layer table and parameter count.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    /// SqueezeNet v1.1 backbone with a 512-wide dense head.
    #[value(name = "v1.1")]
    V1_1,
    /// Two small fire modules; for smoke tests.
    Tiny,
}

impl Arch {
    pub fn config(self, num_classes: usize, image_size: usize) -> ModelConfig {
        let mut cfg = match self {
            Arch::V1_1 => ModelConfig::squeezenet_v1_1(num_classes),
            Arch::Tiny => ModelConfig::tiny(num_classes),
        };
        cfg.input_size = image_size;
        cfg
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::V1_1 => "v1.1",
            Arch::Tiny => "tiny",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root with one sub-directory per class.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Side of the square network input.
    #[arg(long, default_value_t = 244)]
    pub image_size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub augment: bool,
    /// Random horizontal mirroring (changes hand chirality).
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub flip: bool,
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub dropout: bool,
    /// Continue from this checkpoint; its config must match the flags.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Where the best-validation checkpoint is written.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines metrics file [default: <out>.metrics.jsonl]
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Arch::V1_1)]
    pub arch: Arch,
    /// Single-threaded, bit-reproducible run with zeroed timings.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write the confusion matrix here as CSV.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Number of classes to report; clamped to the class count.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub top: u64,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["checkpoint", "arch_only"]))]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Describe a freshly configured model instead of a checkpoint.
    #[arg(long)]
    pub arch_only: bool,
    #[arg(long, default_value_t = 24, conflicts_with = "checkpoint")]
    pub classes: usize,
    #[arg(long, default_value_t = 244, conflicts_with = "checkpoint")]
    pub image_size: usize,
    #[arg(long, value_enum, default_value_t = Arch::V1_1, conflicts_with = "checkpoint")]
    pub arch: Arch,
    /// Emit JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}
