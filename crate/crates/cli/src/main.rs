#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crossclr_core::skeldata::ViewKind;

use config::PretrainMode;

#[derive(Parser, Debug)]
#[command(name = "crossclr", version, about = "Cross-view contrastive pretraining for skeleton sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test dataset.
    GenData(GenDataArgs),
    /// Pretrain one encoder pair per view.
    Pretrain(PretrainArgs),
    /// Evaluate pretrained encoders.
    Eval(EvalArgs),
    /// Write hidden vectors of a dataset split to CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    poses: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    motions: Option<u64>,
    /// Training samples per class.
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    per_class_test: Option<usize>,
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<PretrainMode>,
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<ViewKind>>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    switch_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Parent directory of the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Linear,
    Knn,
    Finetune,
    Semi,
}

impl Protocol {
    fn name(self) -> &'static str {
        match self {
            Protocol::Linear => "linear",
            Protocol::Knn => "knn",
            Protocol::Finetune => "finetune",
            Protocol::Semi => "semi",
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(value_enum)]
    protocol: Protocol,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory holding `ckpt-<view>/` subdirectories.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "joint")]
    views: Vec<ViewKind>,
    /// Fuse per-view class probabilities.
    #[arg(long)]
    ensemble: bool,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// Classifier epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; defaults to `<ckpt>/eval-<protocol>.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "joint")]
    view: ViewKind,
    #[arg(long)]
    out: PathBuf,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Eval(a) => commands::eval(a),
        Command::ExportEmbeddings(a) => commands::export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
