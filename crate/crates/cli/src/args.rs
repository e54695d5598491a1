use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "terraseg", version, about = "Temporally consistent unsupervised terrain segmentation")]
pub struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true, env = "TERRASEG_THREADS")]
    pub threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment a frame sequence and write a run directory.
    Segment(SegmentArgs),
    /// Score a run against colour-coded ground truth.
    Eval(EvalArgs),
    /// Redo the global clustering for several k and score each.
    Sweep(SweepArgs),
    /// Blend label colours over the frames.
    Overlay(OverlayArgs),
    /// Write a synthetic dataset (frames, features, ground truth, palette).
    Synth(SynthArgs),
    /// Print header and value statistics of feature files.
    InspectFeatures(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DescriptorArg {
    PooledOnly,
    RegisterCls,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Directory of frame images (png/jpg), paired with features by file stem.
    #[arg(long)]
    pub frames: PathBuf,
    /// Directory of `<stem>.fsf` feature files.
    #[arg(long)]
    pub features: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// key = value file applied before the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Frames per local clustering window.
    #[arg(long)]
    pub window_len: Option<usize>,
    /// Clusters per window.
    #[arg(long)]
    pub k_local: Option<usize>,
    /// Clusters over the whole sequence.
    #[arg(long)]
    pub k_global: Option<usize>,
    /// Superpixel grid spacing in pixels.
    #[arg(long)]
    pub region_size: Option<u32>,
    /// Gaussian blur sigma before superpixels.
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    /// Superpixel iterations.
    #[arg(long)]
    pub slic_iters: Option<u32>,
    /// Processing size as WxH, or `none` to keep frame sizes.
    #[arg(long)]
    pub resize: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub descriptor_mode: Option<DescriptorArg>,
    /// Register-attention blend weight (register-cls mode).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// CLS blend weight (register-cls mode).
    #[arg(long)]
    pub beta: Option<f64>,
    /// Only write labels and the manifest.
    #[arg(long)]
    pub no_intermediates: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Temporal,
    Zeroshot,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatchingArg {
    Majority,
    Hungarian,
}

#[derive(Debug, Args)]
pub struct GroundTruthArgs {
    /// Directory of colour-coded `<stem>.png` annotations.
    #[arg(long)]
    pub gt: PathBuf,
    /// CSV with columns r,g,b,class_id,class_name (class_id -1 = ignore).
    #[arg(long)]
    pub palette: PathBuf,
    #[arg(long, value_enum, default_value = "temporal")]
    pub protocol: ProtocolArg,
    #[arg(long, value_enum, default_value = "majority")]
    pub matching: MatchingArg,
    /// Where to write the CSV report (defaults inside the run directory).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[command(flatten)]
    pub truth: GroundTruthArgs,
    /// Also print per-class scores.
    #[arg(long)]
    pub per_class: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Run directory written by `segment` with intermediates.
    #[arg(long)]
    pub run: PathBuf,
    /// Global cluster counts.
    #[arg(long, value_delimiter = ',', default_values_t = [400usize, 200, 100, 50, 25, 12])]
    pub k: Vec<usize>,
    #[command(flatten)]
    pub truth: GroundTruthArgs,
    /// Also save each relabelled sequence under DIR/k_<k>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Directory holding the original frames.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Label colour opacity in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    Vertical,
    Diagonal,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    #[arg(long, default_value_t = 128)]
    pub width: u32,
    #[arg(long, default_value_t = 128)]
    pub height: u32,
    /// Latent classes.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Feature grid rows.
    #[arg(long, default_value_t = 32)]
    pub grid_h: usize,
    /// Feature grid columns.
    #[arg(long, default_value_t = 32)]
    pub grid_w: usize,
    #[arg(long, value_enum, default_value = "vertical")]
    pub layout: LayoutArg,
    /// Band displacement per frame in pixels (at most 2).
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub drift: f64,
    /// Per-coordinate feature noise sigma (class prototypes lie 1 apart).
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 4)]
    pub registers: usize,
    /// Omit the CLS token.
    #[arg(long)]
    pub no_cls: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Feature files or directories of them.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    /// Check that every frame in DIR has a feature file and vice versa.
    #[arg(long)]
    pub frames: Option<PathBuf>,
}
