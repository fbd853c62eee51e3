//! `vwgn`: train VAE-WGAN models and produce sample sheets, latent-space strips,
//! embeddings and attribute reports.

mod commands;
mod config;
mod grid;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bad arguments, config or paths. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: String) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg))
}

#[derive(Debug, Parser)]
#[command(name = "vwgn", version, about = "VAE with feature-consistent and Wasserstein adversarial losses")]
struct Cli {
    /// Directory for every file a command writes [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// RNG seed; falls back to $VWGN_SEED, then 0
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes step_<N>.ckpt snapshots, final.ckpt and loss_log.csv
    Train(TrainArgs),
    /// Decode z ~ N(0, I) into a sample grid (generated.png)
    Generate(GenerateArgs),
    /// Originals over posterior-mean reconstructions (reconstruction.png)
    Reconstruct(ReconstructArgs),
    /// Linear interpolation strips between two codes (interpolation.png)
    Interpolate(InterpolateArgs),
    /// Attribute-vector strips z + alpha * v (manipulate_<attr>.png)
    Manipulate(ManipulateArgs),
    /// Mean-difference attribute vectors from annotated images (attr_vectors.vwnv)
    AttrVector(AttrVectorArgs),
    /// 2-D embedding of posterior means (embedding.csv, optional embedding.png)
    Embed(EmbedArgs),
    /// Five-view linear attribute classifiers (attribute_accuracy.csv)
    EvalAttrs(EvalAttrsArgs),
    /// Inception-style score of a folder of images (score.txt)
    Score(ScoreArgs),
    /// Write a synthetic annotated face folder (NNNNNN.png + list_attr.txt)
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Config file of `section.key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings: paper (full width, batch 64) or desk (quarter width, batch 16)
    #[arg(long)]
    preset: Option<String>,
    /// Folder of training images
    #[arg(long)]
    data: Option<PathBuf>,
    /// Frozen perceptual net to load instead of pretraining one on shapes
    #[arg(long)]
    perceptual: Option<PathBuf>,
    /// Continue from a snapshot
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Comma-separated feature taps, e.g. relu1_1,relu2_1,relu3_1
    #[arg(long)]
    loss_taps: Option<String>,
    /// vae_wgan, feature_vae or pixel_vae
    #[arg(long)]
    objective: Option<String>,
    /// Stop once this many steps have run in total
    #[arg(long)]
    max_steps: Option<u64>,
    /// Hold this many images out of training (listed in test_ids.txt)
    #[arg(long)]
    holdout: Option<usize>,
    /// Any config key, e.g. --set train.beta=0.25 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Print the inception-style score of the generated images
    #[arg(long)]
    score: bool,
    /// Score classifier; defaults to the checkpoint's perceptual net
    #[arg(long)]
    score_net: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image files or folders
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Left endpoint image; random codes are used when omitted
    #[arg(long, requires = "right")]
    left: Option<PathBuf>,
    #[arg(long, requires = "left")]
    right: Option<PathBuf>,
    #[arg(long, default_value_t = 11)]
    frames: usize,
    /// Number of random pairs when no images are given
    #[arg(long, default_value_t = 1)]
    rows: usize,
}

#[derive(Debug, Args)]
struct ManipulateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// File written by attr-vector
    #[arg(long)]
    vectors: PathBuf,
    /// Attribute name (repeatable); one strip per attribute
    #[arg(long = "attr", required = true)]
    attrs: Vec<String>,
    #[arg(long, default_value_t = 11)]
    alpha_steps: usize,
    /// Alphas run evenly from 0 to this value
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    alpha_max: f32,
    /// Random codes per strip when no images are given
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Image files or folders to edit
    images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct AttrVectorArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Annotation file in the CelebA list layout
    #[arg(long)]
    attributes: PathBuf,
    /// Attribute name (repeatable); all attributes when omitted
    #[arg(long = "attr")]
    attrs: Vec<String>,
    /// Maximum samples per side
    #[arg(long, default_value_t = 2000)]
    n: usize,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 625)]
    n: usize,
    /// tsne_exact or pca
    #[arg(long, default_value = "tsne_exact")]
    method: String,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Also draw a thumbnail scatter (embedding.png)
    #[arg(long)]
    scatter: bool,
}

#[derive(Debug, Args)]
struct EvalAttrsArgs {
    /// Five checkpoints, one per view
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    attributes: PathBuf,
    /// Attribute name (repeatable); all attributes when omitted
    #[arg(long = "attr")]
    attrs: Vec<String>,
    #[arg(long, default_value_t = 500)]
    test_count: usize,
    /// Use at most this many training images
    #[arg(long)]
    train_count: Option<usize>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Folder of images to score
    #[arg(long)]
    data: PathBuf,
    /// Score classifier (perceptual file or training checkpoint)
    #[arg(long)]
    score_net: PathBuf,
    /// Score only the first n images
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    n: usize,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(vaewgan::Error::Config(_)) = cause.downcast_ref::<vaewgan::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
