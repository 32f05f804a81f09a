//! The `gapforge` command line.
//!
//! Exit codes: 0 success, 1 failed check or numeric abort, 2 usage error,
//! 3 I/O or file-format error.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::losses::gradcheck::{GradLoss, DEFAULT_STEP};
use crate::losses::Objective;
use crate::metrics::Direction;

pub use manifest::{RunManifest, Timing, MANIFEST_FILE, TIMING_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "gapforge",
    version,
    args_override_self = true,
    about = "Modality-gap objectives, diagnostics and a toy training harness"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic paired dataset.
    Synth(SynthArgs),
    /// Train encoders on a dataset directory.
    Train(TrainArgs),
    /// Report alignment and retrieval metrics on the test split.
    Eval(EvalArgs),
    /// Write test-split embeddings as JSONL and GFB1 files.
    Export(ExportArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of pairs.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, env = "GAPFORGE_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(short, long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long)]
    pub d_semantic: Option<usize>,
    /// Feature width per modality, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub d_feat: Option<Vec<usize>>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// JSON file with (a subset of) the generator spec.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    pub data: PathBuf,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub objective: Option<Objective>,
    /// JSON file with (a subset of) the training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the long schedule (100 epochs, lr 1e-4, d = 512).
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub tau_init: Option<f64>,
    #[arg(long)]
    pub learnable_tau: Option<bool>,
    #[arg(long)]
    pub w_atp: Option<f64>,
    #[arg(long)]
    pub w_cu: Option<f64>,
    #[arg(long)]
    pub w_contrastive: Option<f64>,
    #[arg(long, env = "GAPFORGE_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub bias_std: Option<f64>,
    #[arg(long)]
    pub weight_gain: Option<f64>,
    #[arg(long)]
    pub anchor: Option<usize>,
    /// Apply ATP before row normalization.
    #[arg(long)]
    pub atp_unnormalized: bool,
    #[command(flatten)]
    pub report: ReportFlags,
}

#[derive(Debug, Args, Clone)]
pub struct ReportFlags {
    #[arg(long, value_enum)]
    pub direction: Option<Direction>,
    /// Recall cut-offs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Use the summed (not averaged) centroid in the gap metric.
    #[arg(long)]
    pub gap_sum: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file written by `train`.
    #[arg(required_unless_present = "embeddings", requires = "data")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Evaluate exported embeddings instead of a checkpoint.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    pub embeddings: Option<PathBuf>,
    /// Read the binary `.gfb` exports rather than JSONL.
    #[arg(long, requires = "embeddings")]
    pub binary: bool,
    #[arg(long, value_enum, default_value = "json")]
    pub format: ReportFormat,
    /// Row label in CSV output.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub report: ReportFlags,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    #[arg(short, long, default_value = "export")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, value_delimiter = ',')]
    pub losses: Option<Vec<GradLoss>>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Number of random configurations per loss.
    #[arg(long, default_value_t = 20)]
    pub configs: usize,
    #[arg(long, env = "GAPFORGE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub step: f64,
}

/// An error carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Format { .. } | Error::Json(_) => EXIT_IO,
            Error::InvalidArgument(_) | Error::ShapeMismatch(_) | Error::Unsupported(_) => {
                EXIT_USAGE
            }
            _ => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let echo: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match commands::dispatch(cli.command, echo) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
