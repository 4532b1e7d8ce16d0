//! Command-line front end: argument definitions, configuration files and the
//! commands themselves. `main.rs` only parses arguments and maps errors to
//! exit codes.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::run;
pub use config::CliConfig;

/// Exit status of a command that ran to completion.
pub const EXIT_OK: u8 = 0;
/// A verification (gradient check) found offending parameters.
pub const EXIT_VERIFY: u8 = 1;
/// Bad arguments, configuration, data or files.
pub const EXIT_USAGE: u8 = 2;
/// Training produced a non-finite loss.
pub const EXIT_DIVERGED: u8 = 3;

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let diverged = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<vitae::Error>(), Some(vitae::Error::Divergence { .. })));
    if diverged {
        EXIT_DIVERGED
    } else {
        EXIT_USAGE
    }
}

#[derive(Debug, Parser)]
#[command(name = "vitae", version, about = "Build, train, verify and inspect ViTAE models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON configuration; writes metrics.csv and ckpt_epochN.vtae.
    Train(TrainArgs),
    /// Top-1 accuracy and loss of a checkpoint.
    Evaluate(InspectArgs),
    /// Compare every analytic gradient with central finite differences (float64).
    Gradcheck(GradcheckArgs),
    /// Parameter count per module.
    Params(ModelArgs),
    /// Multiply-accumulates per module for one input.
    Macs(MacsArgs),
    /// Mean attention distance of every attention layer; writes attn_dist.csv.
    AttnDist(InspectArgs),
    /// Grad-CAM maps on the last normal cell; writes cam_<id>.pgm.
    Cam(CamArgs),
    /// Train a matrix of structural variants; writes ablation.csv.
    Ablate(AblateArgs),
    /// Print a configuration file fully resolved.
    Config {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data_fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "vitae-t", conflicts_with = "config")]
    pub preset: String,
    /// Model or run configuration file instead of a preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print CSV instead of a table.
    #[arg(long)]
    pub csv: bool,
    /// Also write params.csv / macs.csv here.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MacsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Square input side; defaults to the model's own input size.
    #[arg(long)]
    pub input: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "vitae-micro", conflicts_with = "config")]
    pub preset: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `synthetic`, or an IDX image file (with `--labels`).
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Samples per class of the synthetic set.
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    /// Seed of the synthetic set.
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    /// Only the first `limit` samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Model configuration the checkpoint must match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CamArgs {
    #[command(flatten)]
    pub inspect: InspectArgs,
    /// Target class; defaults to each image's predicted class.
    #[arg(long)]
    pub class: Option<usize>,
    /// Sample indices to explain.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub index: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    /// Base run configuration; defaults to vitae-micro-64 on a small synthetic set.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}
