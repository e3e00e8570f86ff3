//! `avsol`: generate synthetic data, train, evaluate, gradient-check and
//! render.
//!
//! Every subcommand takes an optional JSON `--config` file; flags override
//! its fields one by one, and the file overrides built-in defaults. Each run
//! writes `resolved_config.json` next to its outputs.

mod config;
mod eval;
mod gen;
mod gradcheck;
mod render;
mod train;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{overlay, RunSnapshot, SNAPSHOT_FILE};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    /// 1 usage, 2 data or validation, 3 internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "avsol", version, about = "Sounding-object localization toolkit")]
pub struct Cli {
    /// More log output; repeat for debug messages.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a generated dataset and score it on the test split.
    Train(TrainArgs),
    /// Score a heatmap file against an annotation file.
    Eval(EvalArgs),
    /// Check every backward rule and the whole model against finite differences.
    Gradcheck(GradcheckArgs),
    /// Draw heatmaps and boxes over the frames of one clip as PPM images.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Generator config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long)]
    pub train_clips: Option<usize>,
    #[arg(long)]
    pub val_clips: Option<usize>,
    #[arg(long)]
    pub test_clips: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["avc", "cls", "dnm"])]
    pub mode: Option<String>,
    #[arg(long, value_parser = ["static", "cdf"])]
    pub fusion: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train without flips and crops.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON with any of `annotations`, `heatmaps`, `grid_w`, `grid_h`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    #[arg(long)]
    pub grid_w: Option<usize>,
    #[arg(long)]
    pub grid_h: Option<usize>,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model config (JSON) for the whole-model check.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per op.
    #[arg(long, default_value_t = 20)]
    pub draws: usize,
    /// Random inputs for the whole-model check.
    #[arg(long, default_value_t = 3)]
    pub model_draws: usize,
    /// Elements sampled per parameter tensor in the whole-model check.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value = "gradcheck")]
    pub out: PathBuf,
    /// Perturb one op's backward rule.
    #[arg(long, hide = true)]
    pub corrupt_op: Option<String>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Clip file (`.avcl`); its stem is the clip id.
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long)]
    pub heatmaps: PathBuf,
    /// Defaults to `annotations.jsonl` one level above the clip's directory.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Output pixels per input pixel.
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    #[arg(long, default_value = "render")]
    pub out: PathBuf,
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Gradcheck(a) => gradcheck::run(&a),
        Command::Render(a) => render::run(&a),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
