//! Command-line flags.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "demmae", version, about = "Masked-autoencoder pre-training and segmentation of DEM tiles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic DEM scenes with building and road masks.
    Synth(SynthArgs),
    /// Pre-train a masked autoencoder on the tiles of a manifest.
    Pretrain(PretrainArgs),
    /// Fine-tune a segmentation head.
    Finetune(FinetuneArgs),
    /// Score a segmentation checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Segment one ASCII grid and write the class mask as PGM.
    Predict(PredictArgs),
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key=value` override file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model preset: tiny or paper.
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory; must be absent or empty.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    /// Scene side in pixels; defaults to the preset image size.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run directory; must be absent or empty.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Continue from an MAE checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub run_dir: PathBuf,
    /// upernet or unet.
    #[arg(long, default_value = "upernet")]
    pub head: String,
    /// building or road.
    #[arg(long, default_value = "building")]
    pub task: String,
    /// MAE or UperNet checkpoint supplying the backbone.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Keep backbone weights fixed (upernet only; default true).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub freeze_backbone: Option<bool>,
    /// Train on a seeded subset of this many training tiles.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Share of training-label components to erase.
    #[arg(long)]
    pub drop_fraction: Option<f64>,
    /// Average or tile the patch embedding when channel counts differ.
    #[arg(long)]
    pub adapt_channels: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// train, val or all.
    #[arg(long, default_value = "val")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    /// ESRI ASCII grid.
    #[arg(long)]
    pub dem: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output PGM path.
    #[arg(long)]
    pub out: PathBuf,
}
