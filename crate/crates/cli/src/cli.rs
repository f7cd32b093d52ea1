//! Argument definitions for the `voxgan` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use voxgan::nn::Arch;

#[derive(Debug, Parser)]
#[command(name = "voxgan", version, about = "Train, invert and explore 3D GANs for gray-scale volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a corpus of procedural bone phantoms.
    Phantom(PhantomArgs),
    /// Crop/pad, denoise, subsample, split and augment scans into training stacks.
    Preprocess(PreprocessArgs),
    /// Train a generator/critic pair through all five growth stages.
    Train(TrainArgs),
    /// Train the inversion encoder of a checkpoint.
    TrainEncoder(TrainEncoderArgs),
    /// Invert a volume to a latent code (encoder + refinement).
    Invert(InvertArgs),
    /// Sample volumes with the truncation trick.
    Generate(GenerateArgs),
    /// Decode interior points of the line between two codes.
    Transition(TransitionArgs),
    /// Mix the styles of two codes at a layer boundary.
    Mix(MixArgs),
    /// Compute semantic latent directions.
    Directions(DirectionsArgs),
    /// Push an inverted volume along a semantic direction.
    Edit(EditArgs),
    /// FID, precision, recall and realism between two corpora.
    Metrics(MetricsArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad extent {p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("shape {s:?} must have three extents"))
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Extents `d,h,w`.
    #[arg(long, value_parser = parse_shape, default_value = "32,64,64")]
    pub shape: [usize; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON preprocessing configuration; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Crop/pad target extents `d,h,w`.
    #[arg(long, value_parser = parse_shape)]
    pub target_shape: Option<[usize; 3]>,
    /// Cosine-coefficient clip bound of the noise synthesis.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub subsample: Option<usize>,
    /// Number of overlapping slice stacks per scan.
    #[arg(long)]
    pub stacks: Option<usize>,
    #[arg(long)]
    pub stack_depth: Option<usize>,
    /// Augmented copies per stack (0 keeps stacks unaugmented).
    #[arg(long)]
    pub aug_per_stack: Option<usize>,
    /// Rescale the corpus to [0, 1] by its global min/max first.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "progan")]
    pub arch: Arch,
    /// Generator channel base.
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    /// Critic channel base (defaults to the generator's).
    #[arg(long)]
    pub critic_channels: Option<usize>,
    /// Fixed generator steps per stage instead of the sample budget.
    #[arg(long)]
    pub steps_per_stage: Option<usize>,
    /// One batch size for every stage.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub n_critic: Option<usize>,
    /// JSON training configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainEncoderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the checkpoint with encoder (defaults to in place).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Checked against the checkpoint when given.
    #[arg(long)]
    pub arch: Option<Arch>,
    /// Refinement steps.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the reconstruction volume here.
    #[arg(long)]
    pub reconstruction: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Truncated-normal bound (progressive checkpoints).
    #[arg(long, conflicts_with = "psi")]
    pub truncation: Option<f64>,
    /// Truncation ψ (style-based checkpoints).
    #[arg(long)]
    pub psi: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TransitionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub code_a: PathBuf,
    #[arg(long)]
    pub code_b: PathBuf,
    /// Interior frames at α = i / (steps + 1).
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Number of leading style inputs taken from the source (0..=15).
    #[arg(long)]
    pub boundary: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DirectionsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// 1-based index into the eigenvalue-sorted directions.
    #[arg(long, default_value_t = 1)]
    pub direction_index: usize,
    #[arg(long, default_value_t = 4.0, allow_negative_numbers = true)]
    pub strength: f64,
    /// Refinement steps of the inversion.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Output directory for edited, reconstruction and residual volumes.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub generated: PathBuf,
    /// Neighbourhood size of the k-NN manifolds.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Phantoms used to train the reference feature extractor.
    #[arg(long, default_value_t = 200)]
    pub extractor_phantoms: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// A checkpoint directory, or a directory of checkpoint directories.
    #[arg(long)]
    pub checkpoint_dir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value = "voxgan-store")]
    pub store_dir: PathBuf,
    /// Concurrent compute jobs.
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
}
