//! The `spe` command line: dataset generation, training, evaluation, noise
//! sweeps and embedding export.
//!
//! Every run writes its fully resolved configuration next to its outputs, and
//! `spe replay --config <file>` re-executes a run from that file alone.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use spe_core::corruption::{OcclusionMode, DEFAULT_CORRUPTION_PROBABILITY};
use spe_core::encoder::{ModelKind, PoolMode, DEFAULT_GAMMA0};
use spe_core::eval::{SweepKind, DEFAULT_EVAL_EPISODES, DEFAULT_EVAL_SAMPLES};
use spe_core::sampler::SamplerKind;
use spe_core::trainer::Optimizer;

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "spe",
    version,
    about = "Stochastic prototype embeddings for few-shot classification"
)]
pub struct Cli {
    /// Worker threads; 0 uses one per core. `--threads 1` gives reference outputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic L-shape dataset.
    GenData(GenDataArgs),
    /// Train an SPE or PN encoder on a saved dataset.
    Train(TrainArgs),
    /// Evaluate a model on episodes under a support/query occlusion regime.
    Eval(EvalArgs),
    /// Measure predicted variance while hue noise or leg shortening grows.
    Sweep(SweepArgs),
    /// Write per-instance embedding means and variances as CSV.
    ExportEmbeddings(ExportArgs),
    /// Re-run a command from a resolved config file.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EpisodeArgs {
    /// Classes per episode.
    #[arg(long, default_value_t = 4)]
    pub ways: usize,
    /// Support instances per class.
    #[arg(long, default_value_t = 2)]
    pub shots: usize,
    /// Query instances per class.
    #[arg(long, default_value_t = 5)]
    pub queries: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Store latent feature 4-vectors instead of rendered pixels.
    #[arg(long)]
    pub feature_mode: bool,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Share of instances that receive hue and leg-length noise.
    #[arg(long, default_value_t = 0.15)]
    pub noisy_fraction: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the model, training log and config.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "spe")]
    pub model: ModelKind,
    /// Sampler for the training loss.
    #[arg(long, default_value = "intersection")]
    pub sampler: SamplerKind,
    /// Samples per query for the training loss.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Embedding dimensionality.
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "128,64")]
    pub hidden: Vec<usize>,
    /// Downsampling factor applied to pixel inputs before the first layer; 1 disables it.
    #[arg(long, default_value_t = 4)]
    pub pool: usize,
    #[arg(long, default_value = "avg")]
    pub pool_mode: PoolMode,
    #[arg(long, default_value = "adam")]
    pub optimizer: Optimizer,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub halve_every: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub episodes_per_epoch: usize,
    #[arg(long, default_value_t = 100)]
    pub validation_episodes: usize,
    /// Naive-sampler draws per query during validation.
    #[arg(long, default_value_t = DEFAULT_EVAL_SAMPLES)]
    pub eval_samples: usize,
    #[arg(long, default_value_t = DEFAULT_GAMMA0)]
    pub gamma0: f64,
    /// Occlusion applied to training support and query images.
    #[arg(long, default_value = "clean")]
    pub occlusion: OcclusionMode,
    /// Per-unit occlusion probability when `--occlusion corrupt`.
    #[arg(long, default_value_t = DEFAULT_CORRUPTION_PROBABILITY)]
    pub corruption_prob: f64,
    /// Occlusion unit side in pixels; 0 uses the whole image.
    #[arg(long, default_value_t = 0)]
    pub unit_size: usize,
    /// Share of each class held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub episode: EpisodeArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    pub model_path: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "clean")]
    pub support: OcclusionMode,
    #[arg(long, default_value = "clean")]
    pub query: OcclusionMode,
    /// Per-unit occlusion probability for corrupt sets.
    #[arg(long, default_value_t = 1.0)]
    pub corruption_prob: f64,
    /// Occlusion unit side in pixels; 0 uses the whole image.
    #[arg(long, default_value_t = 0)]
    pub unit_size: usize,
    #[arg(long, default_value_t = DEFAULT_EVAL_EPISODES)]
    pub episodes: usize,
    #[arg(long, default_value_t = DEFAULT_EVAL_SAMPLES)]
    pub eval_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Second model directory for a paired comparison on the same episodes.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Check the evaluation invariants and exit non-zero if one fails.
    #[arg(long)]
    pub verify: bool,
    #[command(flatten)]
    pub episode: EpisodeArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model_path: PathBuf,
    /// CSV output file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "hue")]
    pub kind: SweepKind,
    /// Comma-separated noise levels; omitted uses the kind's default grid,
    /// an empty string gives a header-only table.
    #[arg(long)]
    pub levels: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub samples_per_level: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Check the sweep's monotonicity properties and exit non-zero if one fails.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model_path: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// CSV output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Resolved config file written by an earlier run.
    #[arg(long)]
    pub config: PathBuf,
}

/// Parses `args`, runs the command and maps failures to exit codes.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                error::EXIT_CONFIG
            } else {
                0
            });
        }
    };
    let result = Cli::from_arg_matches(&matches)
        .map_err(|e| CliError::Config(e.to_string()))
        .and_then(|cli| commands::dispatch(cli, &matches));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
