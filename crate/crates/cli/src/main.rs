//! `nice`: pretrain classifiers, train mask generators, explain predictions
//! and sweep mixed-resolution compression.

mod commands;
mod config;
mod manifest;
mod resolve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nice_core::trainer::{OptimizerKind, Schedule};
use nice_core::Regime;

use config::{FileConfig, Preset, SizeList, UsageError};

#[derive(Parser, Debug)]
#[command(name = "nice", version, about = "Learned pixel masks for classifier explanation and image compression")]
struct Cli {
    /// `key = value` settings file (a run manifest works too); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier from scratch and save its checkpoint.
    Pretrain(PretrainArgs),
    /// Train a mask generator against a pretrained classifier.
    Train(TrainArgs),
    /// Write masks, overlays and predictions for a few images.
    Explain(ExplainArgs),
    /// Encode mixed-resolution images at several block sizes and report size and accuracy.
    #[command(alias = "compress")]
    Sweep(SweepArgs),
    /// Generate the synthetic 4-class color shapes dataset.
    SynthShapes(SynthArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// `mnist`, `shapes` (both under $NICE_DATA_DIR) or a dataset directory.
    #[arg(long)]
    dataset: Option<String>,
    /// Side length images from directories are resized to.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(Args, Debug)]
struct OptimArgs {
    /// Built-in defaults: mnist or small-color.
    #[arg(long)]
    preset: Option<Preset>,
    /// adam or sgd.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    lr: Option<f64>,
    /// constant, cosine or step(factor,every).
    #[arg(long)]
    schedule: Option<Schedule>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// lenet5 or small-resnet.
    #[arg(long)]
    arch: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    disc_ckpt: Option<PathBuf>,
    /// fixed or finetuned.
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    b_train: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    gen_ckpt: Option<PathBuf>,
    #[arg(long)]
    disc_ckpt: Option<PathBuf>,
    /// An image file, or a dataset with an optional `:train`/`:test` suffix.
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// none or saliency.
    #[arg(long)]
    baseline: Option<String>,
    /// Number of dataset images to explain.
    #[arg(long)]
    limit: Option<usize>,
    /// Block size of the mixed image in each panel; defaults to the full image.
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    gen_ckpt: Option<PathBuf>,
    #[arg(long)]
    disc_ckpt: Option<PathBuf>,
    /// Dataset with an optional `:train`/`:test` suffix.
    #[arg(long)]
    dataset: Option<String>,
    /// Comma-separated block sizes; defaults to the divisors of the image side up to 64.
    #[arg(long)]
    b: Option<SizeList>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Directory for one mixed sample image per block size.
    #[arg(long)]
    samples_dir: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Pretrain(a) => commands::pretrain(a, &cfg),
        Command::Train(a) => commands::train(a, &cfg),
        Command::Explain(a) => commands::explain(a, &cfg),
        Command::Sweep(a) => commands::sweep(a, &cfg),
        Command::SynthShapes(a) => commands::synth_shapes(a, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.chain().any(|c| c.is::<UsageError>()) => {
            eprintln!("error: {e:#}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
