//! Command-line surface. Every command is a pure function of its flags,
//! config file and input files; nothing reads the clock.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attribution::{RenderMode, Target};
use crate::error::Error;

pub use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NOT_SIGNIFICANT: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Lib(Error::Config(_)) => EXIT_USAGE,
            CliError::Lib(
                Error::Spec(_)
                | Error::Format(_)
                | Error::MissingLayers(_)
                | Error::ShapeMismatch { .. }
                | Error::Schema(_)
                | Error::Data(_)
                | Error::Stratification(_)
                | Error::Metric(_)
                | Error::Io { .. }
                | Error::Image { .. },
            ) => EXIT_DATA,
            CliError::Lib(_) => EXIT_INTERNAL,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "lsnb", version, about = "Lesion classification benchmark: data, training, transfer, evaluation, attribution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic lesion dataset in the ingest layout.
    SynthData(SynthArgs),
    /// Train on the source task from scratch and export the weights.
    Pretrain(RunArgs),
    /// Train from scratch (the control arm).
    Train(RunArgs),
    /// Train from a transferred archive with a fresh head.
    Finetune(RunArgs),
    /// Score a trained archive and write its metrics report.
    Evaluate(EvalArgs),
    /// Write ROC and precision-recall curve points.
    Curves(EvalArgs),
    /// Integrated-gradients maps for evaluated samples.
    Attribute(AttributeArgs),
    /// One-tailed Welch test between two run directories.
    Compare(CompareArgs),
    /// Random hyperparameter search over the standard CNN.
    Search(SearchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub positive_fraction: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Appearance family: `target`, or `source` for the pretraining task.
    #[arg(long, value_enum, default_value_t = Variant::Target)]
    pub variant: Variant,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Target,
    Source,
}

#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// Experiment config (TOML); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory holding metadata.csv and images/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model spec (TOML); defaults to the standard CNN sized to the data.
    #[arg(long)]
    pub model_spec: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_runs: Option<usize>,
    /// Weight archive to transfer from (finetune only).
    #[arg(long)]
    pub from_archive: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Disable training-time augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub model_spec: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split file; with it only `--partition` is scored.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Partition::Test)]
    pub partition: Partition,
    /// Output file (evaluate) or directory (curves).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Partition {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Riemann steps; without it 256 steps are used, tightened to 512 when
    /// the completeness gap exceeds 1%.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = Mode::Absolute)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = TargetArg::Logit)]
    pub target: TargetArg,
    /// Attribute only the first N samples of the partition.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Absolute,
    Signed,
}

impl From<Mode> for RenderMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Absolute => RenderMode::Absolute,
            Mode::Signed => RenderMode::Signed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Logit,
    Probability,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Logit => Target::Logit,
            TargetArg::Probability => Target::Probability,
        }
    }
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Baseline run directory (e.g. from-scratch).
    #[arg(long)]
    pub a: PathBuf,
    /// Candidate run directory; the alternative is mean(b) > mean(a).
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value = "auroc")]
    pub metric: String,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 50)]
    pub budget: usize,
    /// Epoch cap per trial.
    #[arg(long, default_value_t = 5)]
    pub trial_epochs: usize,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
