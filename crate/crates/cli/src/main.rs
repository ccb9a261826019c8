//! `advseg`: generate datasets, train, infer, evaluate, self-test and benchmark.
//!
//! Exit status: 0 success, 1 usage, 2 data error, 3 numerical failure or a
//! failed self-test.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use advseg::dataset::Split;
use advseg::model::Variant;
use advseg::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "advseg", version, about = "Adversarial FCN + dense CRF segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset (PGM files plus dataset.json).
    Generate(GenerateArgs),
    /// Train one variant; writes checkpoint.afcr, metrics.csv and config.json.
    Train(TrainArgs),
    /// Segment one PGM image with a checkpoint.
    Infer(InferArgs),
    /// Score a checkpoint (or compare two) on a dataset split.
    Eval(EvalArgs),
    /// Run the gradient, CRF and perturbation self-checks.
    Selftest(SelftestArgs),
    /// Project the runtime of, or run, the fixed synthetic benchmark.
    Bench(BenchArgs),
}

/// Flags shared by the commands that resolve a run configuration.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Number of samples.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: Option<u64>,
    /// Leading fraction of samples assigned to the training split.
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Dataset directory; generated in memory from the config when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub crf_steps_train: Option<usize>,
    #[arg(long)]
    pub crf_steps_test: Option<usize>,
    /// Score the splits every N epochs (0: last epoch only).
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Train on the original images only.
    #[arg(long)]
    pub no_augment: bool,
    /// Continue from a checkpoint; only --epochs, --dataset and --out apply.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Grayscale P5 image of the size the checkpoint was trained on.
    #[arg(long)]
    pub image: PathBuf,
    /// Optional groundtruth mask; prints the Dice of the prediction.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub crf_steps_test: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Second checkpoint; enables the McNemar comparison.
    #[arg(long)]
    pub checkpoint_b: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub crf_steps_test: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// JSON benchmark configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of training seeds (0, 1, ...).
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub train_images: Option<usize>,
    #[arg(long)]
    pub test_images: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Optimiser steps timed per variant for the projection.
    #[arg(long, default_value_t = 2)]
    pub timing_batches: usize,
    /// Stop after printing the runtime projection.
    #[arg(long)]
    pub project_only: bool,
}

/// Failure of a command, carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Contract(_) => Failure::Usage(msg),
            Error::Numerical(_) => Failure::Numerical(msg),
            Error::Shape(_) | Error::Data(_) | Error::Io(_) | Error::Json(_) => Failure::Data(msg),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Selftest(a) => commands::selftest(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
