//! `pcc`: dataset synthesis and ingestion, training, evaluation,
//! completion and ablation for the point-cloud completion toolkit.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or input error.

mod commands;
mod plot;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pcc_core::datagen::Split;
use pcc_core::model::Profile;
use pcc_core::training::LossKind;

#[derive(Parser, Debug)]
#[command(name = "pcc", version, about = "Point-cloud shape completion toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML configuration file; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config's train or synthesis seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Size profile; overrides the config's profile.
    #[arg(long, global = true, value_parser = parse_profile)]
    pub profile: Option<Profile>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create, import or check datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model; resumable from the run directory's checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Complete one partial cloud with a checkpoint.
    Complete(CompleteArgs),
    /// Train and evaluate every cell of the configured ablation grid.
    Ablate(AblateArgs),
}

#[derive(Subcommand, Debug)]
pub enum DatasetCommand {
    /// Render synthetic partial/complete pairs.
    Synth {
        /// Output directory (default: dataset.root from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build pairs from depth and label image sequences.
    Ingest(IngestArgs),
    /// Check a dataset directory.
    Validate {
        /// Dataset directory (default: dataset.root from the config).
        dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Directory of 16-bit depth PGM frames.
    #[arg(long)]
    pub depth: PathBuf,
    /// Directory of label PGM frames with the same file names.
    #[arg(long)]
    pub labels: PathBuf,
    /// Intrinsics key-value file (fx, fy, cx, cy, depth_scale).
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Object model as LABEL:NAME:CLOUD_FILE (repeatable).
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    /// Keep every N-th frame.
    #[arg(long, default_value_t = 5)]
    pub stride: usize,
    /// Points per cloud (default: input_points from the config).
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (default: dataset.root from the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory (default: run_dir from the config).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from the run directory's checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory (default: dataset.root from the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    pub split: Split,
    /// Output directory for the report, tables and plots.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scatter snapshots to draw.
    #[arg(long, default_value_t = 4)]
    pub snapshots: usize,
}

#[derive(Args, Debug)]
pub struct CompleteArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Partial cloud (.xyz or .ply).
    #[arg(long)]
    pub input: PathBuf,
    /// Completed cloud (.xyz or .ply).
    #[arg(long)]
    pub output: PathBuf,
    /// Output point count; must be a multiple of the surface count.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Also write per-point surface ids next to the output.
    #[arg(long)]
    pub surface_ids: bool,
    /// Ground-truth cloud; prints CD and EMD against it.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Dataset directory (default: dataset.root from the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (default: <run_dir>/ablation).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: pcc_core::Error| e.to_string())
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: pcc_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(format!("unknown split {s:?} (expected train or val)")),
    }
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Internal(String),
}

impl From<pcc_core::Error> for Failure {
    fn from(e: pcc_core::Error) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
