//! `fusediff` command-line tool.

pub mod commands;
pub mod config;
pub mod preview;

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use fusediff_core::{PredictionKind, SamplerKind, Split};

#[derive(Debug, Parser)]
#[command(name = "fusediff", version, about = "Residual conditional diffusion for image fusion")]
pub struct Cli {
    /// Log verbosity when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset under the reduced-resolution protocol.
    Synth(SynthArgs),
    /// Train a denoiser and write a checkpoint.
    Train(TrainArgs),
    /// Fuse images with a trained checkpoint.
    Sample(SampleArgs),
    /// Score fused images against the interpolation baseline.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Objective {
    Epsilon,
    X0,
    V,
}

impl From<Objective> for PredictionKind {
    fn from(o: Objective) -> Self {
        match o {
            Objective::Epsilon => PredictionKind::Epsilon,
            Objective::X0 => PredictionKind::X0,
            Objective::V => PredictionKind::V,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Ddim,
    Ddpm,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Ddim => SamplerKind::Ddim,
            SamplerArg::Ddpm => SamplerKind::Ddpm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON run config; command-line flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Dataset root [default: $FUSEDIFF_OUT/data].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of test images.
    #[arg(long)]
    pub count: Option<usize>,
    /// Number of training patches.
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub bands: Option<usize>,
    /// Side of the full-resolution patch.
    #[arg(long)]
    pub patch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Dataset root holding `train/manifest.json`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory [default: $FUSEDIFF_OUT/train].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub objective: Option<Objective>,
    /// Model the full image instead of `gt - lrms_up`.
    #[arg(long, action = ArgAction::SetTrue, conflicts_with = "residual")]
    pub no_residual: bool,
    #[arg(long, action = ArgAction::SetTrue)]
    pub residual: bool,
    #[arg(long, action = ArgAction::SetTrue, conflicts_with = "style_mod")]
    pub no_style_mod: bool,
    #[arg(long, action = ArgAction::SetTrue)]
    pub style_mod: bool,
    #[arg(long, action = ArgAction::SetTrue, conflicts_with = "wavelet_mod")]
    pub no_wavelet_mod: bool,
    #[arg(long, action = ArgAction::SetTrue)]
    pub wavelet_mod: bool,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Training run directory or the checkpoint directory inside it.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Output directory [default: $FUSEDIFF_OUT/samples].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Image `i` starts from noise seeded with `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Images denoised together per network call.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long)]
    pub no_preview: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Directory with `NNNN_fused.ten` files.
    #[arg(long)]
    pub fused: PathBuf,
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Report path [default: <fused>/eval.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub scale_ratio: Option<usize>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
    }
}
