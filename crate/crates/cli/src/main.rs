mod commands;
mod config;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{parse_list, parse_quad, parse_triple};

#[derive(Parser, Debug)]
#[command(name = "imunet", version, about = "Implicit U-Net segmentation: data, training, sparse inference, benchmarks")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic blob dataset.
    Gen(GenArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Segment volumes with a trained checkpoint.
    Predict(PredictArgs),
    /// Dice report of predictions against ground truth.
    Eval(EvalArgs),
    /// Compare dense and sparse inference.
    Bench(BenchArgs),
    /// Grid over one sampling or inference parameter.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num: Option<usize>,
    #[arg(long, value_parser = parse_triple)]
    pub dims: Option<[usize; 3]>,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long, value_parser = parse_triple)]
    pub patch: Option<[usize; 3]>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Encoder block widths, e.g. 8,16,32,64.
    #[arg(long, value_parser = parse_quad)]
    pub channels: Option<[usize; 4]>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Disable data augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug, Clone, Default)]
pub struct InferFlags {
    #[arg(long)]
    pub spacing: Option<usize>,
    /// Sliding-window patch; defaults to the training patch.
    #[arg(long, value_parser = parse_triple)]
    pub patch: Option<[usize; 3]>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A single image volume.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub input: Option<PathBuf>,
    /// A dataset directory; every image is segmented.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output file (with --input) or directory (with --data).
    #[arg(long)]
    pub out: PathBuf,
    /// Also run spacing 1 and report the agreement.
    #[arg(long)]
    pub compare_dense: bool,
    #[command(flatten)]
    pub infer: InferFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory with ground-truth labels.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of `<case>_pred.imvol` files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Metrics file (JSON lines); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub infer: InferFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    K,
    Alpha,
    Sigma,
    Spacing,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    #[arg(long, value_parser = parse_list::<f64>)]
    pub values: ::std::vec::Vec<f64>,
    /// Training data (k, alpha, sigma) or evaluation data (spacing).
    #[arg(long)]
    pub data: PathBuf,
    /// Validation data for trained sweeps; defaults to --data.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Required for spacing sweeps.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub spacing: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
