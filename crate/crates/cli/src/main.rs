//! `memo`: generate synthetic data, train, infer, evaluate and sweep
//! granularity scales.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clap::error::ErrorKind;

use memo_core::inference::Strategy;
use memo_core::eval::Protocol;

#[derive(Debug, Parser)]
#[command(name = "memo", version, about = "Masked edge prediction toolkit")]
pub struct Cli {
    /// Seed for every random choice; drawn from entropy and logged if omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic image/edge dataset.
    GenData(GenDataArgs),
    /// Train a network, or fine-tune adapters with --lora.
    Train(TrainArgs),
    /// Predict edge maps for images.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Infer at several granularity scales and score best-of-M.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of samples.
    #[arg(long, short)]
    pub n: usize,
    /// Run configuration; scene settings come from its [data] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Fine-tune rank-R adapters on top of --base instead of training from scratch.
    #[arg(long, value_name = "RANK", requires = "base")]
    pub lora: Option<usize>,
    /// Base checkpoint for --lora.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Override [train] epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct InferOptions {
    /// Early-stop horizon (forward passes per image).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Granularity (guidance) scale.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Write per-image unmasking traces as TSV next to the outputs.
    #[arg(long)]
    pub trace: bool,
    /// Also write loss-free float32 maps of the finalising probabilities.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image files (PPM/PGM) or dataset directories.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub options: InferOptions,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Dataset directory (with manifest) or a directory of PGM edge maps.
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long, default_value = "ceval")]
    pub protocol: Protocol,
    /// Comma-separated scales; predictions are read from pred-dir/scale_<s>/.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    /// Report path (default: <pred-dir>/report_<protocol>.tsv).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory with manifest.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1.0,1.4,1.8")]
    pub scales: Vec<f64>,
    #[arg(long, default_value = "ceval")]
    pub protocol: Protocol,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub options: InferOptions,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
