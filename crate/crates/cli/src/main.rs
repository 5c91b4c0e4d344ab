//! Command-line front end for the hyperspherical zero-shot pipeline.
//!
//! Four commands cover the whole workflow: `make-synthetic` writes a small
//! labeled bundle, `train` fits the two spherical autoencoders on the seen
//! training split, `eval-ood` scores the seen/unseen detector, and
//! `eval-gzsl` routes test rows through the gated experts and reports
//! accuracy. Settings resolve in three layers: built-in defaults, then a
//! `key = value` config file, then command-line flags, with later layers
//! winning. Every report embeds the fully resolved configuration so a run
//! can be reproduced from its own output.

mod commands;
mod runconfig;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spheregate_core::Error;

#[derive(Parser)]
#[command(
    name = "spheregate",
    version,
    about = "Spherical latent alignment with boundary-gated zero-shot classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    MakeSynthetic(MakeSyntheticArgs),
    /// Train on the bundle's seen training split.
    Train(TrainArgs),
    /// Score seen/unseen detection at one or more gamma levels.
    EvalOod(EvalOodArgs),
    /// Score generalized zero-shot accuracy through the gated experts.
    EvalGzsl(EvalGzslArgs),
}

#[derive(Args)]
struct MakeSyntheticArgs {
    /// Directory the bundle is written to.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_seen: usize,
    #[arg(long, default_value_t = 4)]
    n_unseen: usize,
    #[arg(long, default_value_t = 16)]
    attr_dim: usize,
    #[arg(long, default_value_t = 64)]
    feat_dim: usize,
    #[arg(long, default_value_t = 100)]
    samples_per_class: usize,
    /// Standard deviation of the feature noise.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Training hyperparameter overrides. Every one of these is optional; an
/// absent flag falls back to the config file, then to the default.
#[derive(Args, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate (config file key: learning_rate).
    #[arg(long)]
    lr: Option<f64>,
    /// Cross-reconstruction weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Latent classification weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Transport weight inside the visual-stream loss.
    #[arg(long)]
    lambda_f: Option<f64>,
    /// Transport weight inside the attribute-stream loss.
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    samples_per_posterior: Option<usize>,
    /// Entropic regularization of the transport solver
    /// (config file key: sinkhorn_epsilon).
    #[arg(long)]
    sinkhorn_eps: Option<f64>,
    #[arg(long)]
    kappa_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Standardize features with training-split statistics.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    standardize: Option<bool>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, training log, and report.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` settings file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also save a checkpoint every k completed epochs (0 disables).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalOodArgs {
    /// Dataset bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for the report and ROC files.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` settings file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Boundary quantile level in (0, 1).
    #[arg(long)]
    gamma: Option<f64>,
    /// Comma-separated gamma values; the report gets one row per value and
    /// each value gets its own ROC and boundary files.
    #[arg(long, value_delimiter = ',')]
    gamma_grid: Option<Vec<f64>>,
}

#[derive(Args)]
struct EvalGzslArgs {
    /// Dataset bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for the report and per-row predictions.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` settings file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Boundary quantile level in (0, 1).
    #[arg(long)]
    gamma: Option<f64>,
    /// Unseen-route expert: `baseline` (nearest attribute center) or
    /// `file:<path>` (external per-row predictions).
    #[arg(long)]
    expert: Option<String>,
}

/// Anything that can stop a command, carrying the documented exit code:
/// 2 for configuration problems, 3 for data problems, 4 for numeric
/// failures.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<spheregate_core::DataError> for CliError {
    fn from(e: spheregate_core::DataError) -> Self {
        CliError::Core(Error::Data(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                Error::InvalidArgument(_) | Error::InvalidState(_) => 2,
                Error::Data(_)
                | Error::Io(_)
                | Error::Parse { .. }
                | Error::MissingPredictions { .. }
                | Error::MissingClass { .. } => 3,
                Error::SamplingFailure { .. }
                | Error::NonFiniteLoss { .. }
                | Error::UndefinedMetric(_) => 4,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeSynthetic(args) => commands::make_synthetic(&args),
        Command::Train(args) => commands::train(&args),
        Command::EvalOod(args) => commands::eval_ood(&args),
        Command::EvalGzsl(args) => commands::eval_gzsl(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
