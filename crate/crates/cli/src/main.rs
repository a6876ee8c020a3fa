//! `cda`: command-line front end for the adaptation library.
//!
//! Subcommands cover the individual tools (`mmd`, `cluster`, `eval`,
//! `synth`) and the end-to-end procedure (`adapt`, `pipeline`). Exit codes:
//! 0 on success, 2 for usage and input errors (bad flags, unreadable or
//! malformed files, out-of-range settings), 1 for failures arising during
//! computation (training divergence, degenerate stages).
//!
//! Set `CDA_THREADS` to cap the worker thread count.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

use cda_core::io::Format;
use cda_core::{CdaError, MmdLayers};

#[derive(Parser)]
#[command(
    name = "cda",
    version,
    about = "Clustering-based domain adaptation for recognition embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Kernel MMD between two embedding sets, all three estimators
    Mmd(MmdArgs),
    /// Pseudo-label an embedding set by graph clustering
    Cluster(ClusterArgs),
    /// Generate a synthetic source/target domain pair
    Synth(SynthArgs),
    /// Run the four-stage adaptation on a source/target pair
    Adapt(AdaptArgs),
    /// Verification and identification metrics for a labeled set
    Eval(EvalArgs),
    /// End-to-end run driven by a settings file
    Pipeline(PipelineArgs),
}

/// On-disk embedding format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FileFormat {
    /// EMB1 binary with optional LAB1 sidecar (exact round-trip)
    Binary,
    /// Comma-separated text, one sample per line
    Csv,
}

impl From<FileFormat> for Format {
    fn from(f: FileFormat) -> Format {
        match f {
            FileFormat::Binary => Format::Binary,
            FileFormat::Csv => Format::Csv,
        }
    }
}

/// Which layers contribute MMD terms during Stage-2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayersArg {
    /// Hidden activations only
    Last,
    /// Pre-activations and hidden activations
    LastTwo,
}

impl From<LayersArg> for MmdLayers {
    fn from(l: LayersArg) -> MmdLayers {
        match l {
            LayersArg::Last => MmdLayers::Last,
            LayersArg::LastTwo => MmdLayers::LastTwo,
        }
    }
}

#[derive(Args)]
pub struct MmdArgs {
    /// First embedding file
    pub a: PathBuf,
    /// Second embedding file
    pub b: PathBuf,
    /// Input format
    #[arg(long, value_enum, default_value_t = FileFormat::Binary)]
    pub format: FileFormat,
    /// CSV inputs carry a leading label column
    #[arg(long)]
    pub labeled: bool,
    /// Kernels in the median-bandwidth ladder
    #[arg(long, default_value_t = 5)]
    pub kernels: usize,
    /// Single-kernel bandwidth, replacing the median ladder
    #[arg(long, conflicts_with = "kernels")]
    pub gamma: Option<f64>,
}

#[derive(Args)]
pub struct ClusterArgs {
    /// Embedding file to cluster
    pub input: PathBuf,
    /// Input format
    #[arg(long, value_enum, default_value_t = FileFormat::Binary)]
    pub format: FileFormat,
    /// CSV input carries a leading label column (enables quality metrics)
    #[arg(long)]
    pub labeled: bool,
    /// Cosine similarity threshold for graph edges
    #[arg(long, default_value_t = 0.675)]
    pub alpha: f64,
    /// Pickup threshold for scattered samples
    #[arg(long, default_value_t = 0.8)]
    pub beta: f64,
    /// Minimum connected-component size kept as a cluster
    #[arg(long = "min-size", default_value_t = 3)]
    pub min_size: usize,
    /// Write pseudo-labels (LAB1) to this path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for the source and target files
    #[arg(long)]
    pub out: PathBuf,
    /// Number of classes
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Samples per class in each domain
    #[arg(long, default_value_t = 30)]
    pub samples: usize,
    /// Feature dimension
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Within-class standard deviation
    #[arg(long, default_value_t = 0.1)]
    pub spread: f64,
    /// Norm of the global target-domain offset
    #[arg(long, default_value_t = 0.3)]
    pub shift: f64,
    /// Per-sample magnitude noise along the shift direction
    #[arg(long = "shift-noise", default_value_t = 0.0)]
    pub shift_noise: f64,
    /// Seed for all draws
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output format
    #[arg(long, value_enum, default_value_t = FileFormat::Binary)]
    pub format: FileFormat,
}

#[derive(Args)]
pub struct AdaptArgs {
    /// Labeled source embedding file
    #[arg(long)]
    pub source: PathBuf,
    /// Target embedding file
    #[arg(long)]
    pub target: PathBuf,
    /// Output directory for the checkpoint and run artifacts
    #[arg(long)]
    pub out: PathBuf,
    /// Input format (CSV sources always carry a leading label column)
    #[arg(long, value_enum, default_value_t = FileFormat::Binary)]
    pub format: FileFormat,
    /// CSV target carries a leading label column
    #[arg(long = "target-labels")]
    pub target_labels: bool,
    /// MMD weight in the joint objective
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// SGD learning rate
    #[arg(long = "learning-rate", default_value_t = 0.1)]
    pub learning_rate: f64,
    /// Iteration budget per training stage
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    /// Minibatch size per domain
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Seed for initialization and batch order
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Layers contributing MMD terms
    #[arg(long = "mmd-layers", value_enum, default_value_t = LayersArg::LastTwo)]
    pub mmd_layers: LayersArg,
    /// Fraction of the budget spent on source-only warmup
    #[arg(long, default_value_t = 0.2)]
    pub warmup: f64,
    /// Kernels in the median-bandwidth ladder
    #[arg(long, default_value_t = 5)]
    pub kernels: usize,
    /// Cosine similarity threshold for graph edges
    #[arg(long, default_value_t = 0.675)]
    pub alpha: f64,
    /// Pickup threshold for scattered samples
    #[arg(long, default_value_t = 0.8)]
    pub beta: f64,
    /// Minimum connected-component size kept as a cluster
    #[arg(long = "min-size", default_value_t = 3)]
    pub min_size: usize,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Labeled embedding file to score (probe set when --gallery is given)
    pub input: PathBuf,
    /// Input format (CSV files must carry a leading label column)
    #[arg(long, value_enum, default_value_t = FileFormat::Binary)]
    pub format: FileFormat,
    /// Adapter checkpoint mapped over the inputs before scoring
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Comma-separated FAR operating points
    #[arg(long, default_value = "0.1,0.01,0.001")]
    pub far: String,
    /// Labeled gallery file enabling identification metrics
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// Comma-separated CMC ranks (used with --gallery)
    #[arg(long, default_value = "1,5,10")]
    pub ranks: String,
    /// Comma-separated FPIR operating points for open-set identification
    #[arg(long, requires = "gallery")]
    pub fpir: Option<String>,
    /// Directory for eval_report.tsv, roc.csv and cmc.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a two-component PCA projection of the scored set to this CSV
    #[arg(long)]
    pub pca: Option<PathBuf>,
}

#[derive(Args)]
pub struct PipelineArgs {
    /// Settings file, one `key = value` per line, `#` comments
    #[arg(long)]
    pub config: PathBuf,
    /// Override: labeled source embedding file
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Override: target embedding file
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Override: output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override: graph edge threshold (default 0.675)
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Override: pickup threshold (default 0.8)
    #[arg(long)]
    pub beta: Option<f64>,
    /// Override: minimum cluster size (default 3)
    #[arg(long = "min-size")]
    pub min_size: Option<usize>,
    /// Override: MMD weight (default 0.5)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Override: SGD learning rate (default 0.1)
    #[arg(long = "learning-rate")]
    pub learning_rate: Option<f64>,
    /// Override: iteration budget per stage (default 2000)
    #[arg(long)]
    pub iters: Option<usize>,
    /// Override: minibatch size (default 32)
    #[arg(long)]
    pub batch: Option<usize>,
    /// Override: seed (default 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override: layers contributing MMD terms (default last-two)
    #[arg(long = "mmd-layers", value_enum)]
    pub mmd_layers: Option<LayersArg>,
    /// Override: kernels in the median ladder (default 5)
    #[arg(long)]
    pub kernels: Option<usize>,
    /// Override: comma-separated FAR operating points (default 0.01)
    #[arg(long)]
    pub far: Option<String>,
    /// Sweep the clustering threshold instead of running stages 3-4:
    /// `lo:hi:step`, reporting clusters and accuracy per alpha
    #[arg(long = "sweep-alpha")]
    pub sweep_alpha: Option<String>,
}

fn init_threads() -> Result<(), CdaError> {
    let Ok(raw) = std::env::var("CDA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        CdaError::Invalid(format!(
            "CDA_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    if n == 0 {
        return Err(CdaError::Invalid(
            "CDA_THREADS must be a positive integer, got 0".into(),
        ));
    }
    // Ignore the error from a pool that is already initialized.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn run(cli: Cli) -> Result<(), CdaError> {
    init_threads()?;
    match cli.command {
        Command::Mmd(args) => commands::mmd(&args),
        Command::Cluster(args) => commands::cluster(&args),
        Command::Synth(args) => commands::synth(&args),
        Command::Adapt(args) => commands::adapt(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Pipeline(args) => commands::pipeline(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
