//! `dan`: generate synthetic data, train and query dual attention networks.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dan_core::error::DanError;

use config::Preset;

#[derive(Parser, Debug)]
#[command(name = "dan", version, about = "Dual attention networks on synthetic multimodal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset directory
    GenData(GenDataArgs),
    /// Train an r-DAN or m-DAN model
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Evaluate(EvaluateArgs),
    /// Answer one question with an r-DAN checkpoint
    Answer(AnswerArgs),
    /// Write joint-space embeddings of one modality
    Embed(EmbedArgs),
    /// Rank the other modality of a split against one query item
    Retrieve(RetrieveArgs),
    /// Write attention weights and grayscale heatmaps for one item
    DumpAttention(DumpAttentionArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Vqa,
    Match,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for dan_core::synth::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => dan_core::synth::Split::Train,
            SplitArg::Val => dan_core::synth::Split::Val,
            SplitArg::Test => dan_core::synth::Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Rdan,
    Mdan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Image,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    ImageToText,
    TextToImage,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to $DAN_SEED, then 0
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Regions per scene
    #[arg(long, default_value_t = 8)]
    pub regions: usize,
    #[arg(long, default_value_t = 32)]
    pub region_dim: usize,
    #[arg(long, default_value_t = 26)]
    pub concepts: usize,
    #[arg(long, default_value_t = 6)]
    pub attributes: usize,
    /// Noise sigma as a fraction of the minimum feature separation
    #[arg(long, conflicts_with = "noise_sigma")]
    pub noise_ratio: Option<f64>,
    /// Absolute noise sigma
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Fewest objects named per caption (match only)
    #[arg(long)]
    pub min_objects: Option<usize>,
    /// Most objects named per caption (match only)
    #[arg(long)]
    pub max_objects: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, log and manifest
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    /// JSON file with training settings; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Number of attention steps K
    #[arg(long)]
    pub steps: Option<usize>,
    /// Hidden width d
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Ranking margin (mdan)
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long = "clip")]
    pub clip_threshold: Option<f64>,
    #[arg(long = "dropout")]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr_drop_epoch: Option<usize>,
    #[arg(long)]
    pub lr_drop_factor: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Defaults to the config file, then $DAN_SEED, then 0
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct CheckpointInput {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub input: CheckpointInput,
    /// Manifest path; defaults next to the checkpoint
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnswerArgs {
    #[command(flatten)]
    pub input: CheckpointInput,
    /// Item id within the split
    #[arg(long)]
    pub id: u64,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub input: CheckpointInput,
    #[arg(long, value_enum)]
    pub modality: ModalityArg,
    /// Output embedding container
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub input: CheckpointInput,
    /// Item id whose image (or caption) is the query
    #[arg(long)]
    pub query_id: u64,
    #[arg(long, value_enum, default_value_t = DirectionArg::ImageToText)]
    pub direction: DirectionArg,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DumpAttentionArgs {
    #[command(flatten)]
    pub input: CheckpointInput,
    #[arg(long)]
    pub id: u64,
    /// Output directory for trace.json and the heatmaps
    #[arg(long)]
    pub out: PathBuf,
}

const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_IO: u8 = 4;

fn exit_code(err: &DanError) -> u8 {
    match err {
        DanError::Divergence { .. } => EXIT_DIVERGED,
        DanError::Io { .. }
        | DanError::Json(_)
        | DanError::VersionMismatch { .. }
        | DanError::MalformedRecord { .. }
        | DanError::Checksum { .. }
        | DanError::MalformedFile { .. } => EXIT_IO,
        DanError::Config(_)
        | DanError::Generation(_)
        | DanError::KindMismatch { .. }
        | DanError::NotFound(_)
        | DanError::OutOfRange { .. } => EXIT_USAGE,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Answer(a) => commands::answer(a),
        Command::Embed(a) => commands::embed(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::DumpAttention(a) => commands::dump_attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
