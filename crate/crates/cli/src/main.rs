//! `lmreg`: phantom generation, training, inference, evaluation, spline
//! warping, augmentation preview and oracle self-checks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "lmreg", version, about = "Self-supervised landmark detection by TPS registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic template and subject cohort.
    Phantom(PhantomArgs),
    /// Train a detector on a cohort manifest.
    Train(TrainArgs),
    /// Predict landmarks for volumes.
    Infer(InferArgs),
    /// Score predicted landmark files against ground truth.
    Eval(EvalArgs),
    /// Fit a thin-plate spline between two landmark sets.
    Warp(WarpArgs),
    /// Write an augmented copy of a volume.
    AugmentPreview(AugmentArgs),
    /// Run the gradient, spline and loss oracle suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
pub struct PhantomArgs {
    /// Phantom spec (JSON or TOML); defaults apply to missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub train: usize,
    #[arg(long, default_value_t = 20)]
    pub test: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run config with optional `train` and `detector` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cohort directory written by `phantom`, or its `manifest.json`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Write a resumable checkpoint every this many steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a trainer checkpoint; its configs take precedence.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    /// Model or trainer checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(required = true)]
    pub volumes: Vec<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of `*_landmarks.json` predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory holding ground-truth files of the same names.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = lmreg::metrics::DEFAULT_THRESHOLDS)]
    pub thresholds: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = lmreg::tps::DEFAULT_KERNEL_SCALE)]
    pub kernel_scale: f64,
    /// Volume resampled at `T(x)` for every voxel `x`.
    #[arg(long)]
    pub volume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Rc,
    Affine,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long, value_enum)]
    pub mode: AugmentMode,
    /// Config with optional `rc` and `affine` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Kernel scale used by the spline suite.
    #[arg(long, default_value_t = lmreg::tps::DEFAULT_KERNEL_SCALE)]
    pub kernel_scale: f64,
    /// Directory for `selfcheck.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Warp(a) => commands::warp(&a),
        Command::AugmentPreview(a) => commands::augment_preview(&a),
        Command::Selfcheck(a) => commands::selfcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.kind.code() as u8)
        }
    }
}
