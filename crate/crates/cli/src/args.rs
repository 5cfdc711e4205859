use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "dualformer", version, about = "Hybrid convolution/self-attention image restoration toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parameter and MAC counts, optionally for ablation variants.
    Analyze(AnalyzeArgs),
    /// Restore one PPM image.
    Forward(ForwardArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Effective receptive field of one stage.
    Erf(ErfArgs),
    /// MACs (and optionally time) across resolutions.
    Sweep(SweepArgs),
    /// Toy training on synthetic degradations.
    Train(TrainArgs),
    /// PSNR/SSIM over a directory of predictions.
    Eval(EvalArgs),
}

/// Model selection shared by most commands.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// JSON config: a model config, or a run config with a `model` key.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in model: `paper` or `tiny`.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input size, `S` or `HxW`.
    #[arg(long, default_value = "256")]
    pub resolution: String,
    /// Ablation switch such as `fusion=concat`; repeatable, one row each.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    /// Group rows by this many path components in the text table (0 = all rows).
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Checkpoint; without it the model is freshly initialised from `--seed`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Zero every weight tensor (the identity restoration map).
    #[arg(long, conflicts_with = "weights")]
    pub zero_init: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reference image for PSNR/SSIM.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Reject inputs whose sides are not multiples of 16 instead of reflect-padding.
    #[arg(long)]
    pub no_pad: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// `op`, `block`, `model` or `all`.
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt the backward pass of the named unit (negative control).
    #[arg(long)]
    pub inject_fault: Option<String>,
    /// Only units whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
    /// List unit names and exit.
    #[arg(long)]
    pub list: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ErfArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Stage tag: stem, enc0..enc3, latent_in, latent_after_htb<k>, dec0..dec3, output.
    #[arg(long)]
    pub stage: String,
    /// Input size, `S` or `HxW`.
    #[arg(long, default_value = "64")]
    pub resolution: String,
    /// Feature-map location `h,w`; defaults to the centre.
    #[arg(long)]
    pub location: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Let gradients flow through globally pooled gate statistics.
    #[arg(long)]
    pub no_detach: bool,
    /// Gradient-magnitude map, DFT1 format.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON summary path; printed to stdout when omitted.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated square sizes.
    #[arg(long, default_value = "128,192,256")]
    pub resolutions: String,
    /// Also time one forward pass per size with freshly initialised weights.
    #[arg(long)]
    pub time: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint to write; the optimizer state goes to `<out>.adam`.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log, one JSON object per line.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint and its `.adam` sidecar.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many steps are complete.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// JSON summary path; printed to stdout when omitted.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Print the resolved run config and exit.
    #[arg(long)]
    pub print_config: bool,

    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub heldout: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,

    #[arg(long)]
    pub lambda_psnr: Option<f64>,
    #[arg(long)]
    pub lambda_perceptual: Option<f64>,
    /// Comma-separated extractor stages for the perceptual term.
    #[arg(long)]
    pub perceptual_layers: Option<String>,
    #[arg(long)]
    pub extractor_seed: Option<u64>,

    /// `noise`, `rain`, `haze` or `snow`.
    #[arg(long)]
    pub degrade: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub rain_count: Option<usize>,
    #[arg(long)]
    pub rain_length: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub rain_angle: Option<f64>,
    #[arg(long)]
    pub rain_intensity: Option<f64>,
    #[arg(long)]
    pub haze_transmission: Option<f64>,
    #[arg(long)]
    pub haze_airlight: Option<f64>,
    #[arg(long)]
    pub snow_density: Option<f64>,
    #[arg(long)]
    pub snow_radius: Option<usize>,
    #[arg(long)]
    pub snow_intensity: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of restored PPM images.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference PPM images with matching file names.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Score the BT.601 luma channel instead of RGB.
    #[arg(long)]
    pub y: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
