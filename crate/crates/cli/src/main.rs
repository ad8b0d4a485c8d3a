//! `cptk`: conformal prediction sets from the command line.
//!
//! Exit codes: 0 success, 2 usage, 3 data or validation error, 4 numerical
//! failure.

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cptk_core::conformal::Method;
use cptk_core::{Error, ErrorKind, SetPolicy, SetRule, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "cptk",
    version,
    about = "Conformal prediction sets for classifier outputs"
)]
struct Cli {
    /// Directory that relative output paths are written under.
    #[arg(long, global = true, env = "CPTK_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,

    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with known conditionals.
    Synth(SynthArgs),
    /// Fit a single-threshold conformal predictor and save it as JSON.
    Calibrate(CalibrateArgs),
    /// Train and conformalize a CPSN model.
    TrainCpsn(TrainCpsnArgs),
    /// Print prediction sets as JSON lines.
    Predict(PredictArgs),
    /// Repeated-split evaluation of several methods.
    Eval(EvalArgs),
    /// Summarize a dataset directory or a saved artifact.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 11, value_parser = clap::value_parser!(u64).range(2..))]
    pub k: u64,
    /// Feature dimension, including the log-temperature column.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(2..))]
    pub d: u64,
    /// Number of rows.
    #[arg(long, default_value_t = 20_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Seed for the class means and the samples.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw a per-row difficulty temperature.
    #[arg(long)]
    pub heteroscedastic: bool,
    /// Scale of the class means; larger is easier.
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    /// Factor applied to the true logits before they are written.
    #[arg(long, default_value_t = 1.0)]
    pub distortion: f64,
    /// Smallest per-row temperature.
    #[arg(long, default_value_t = 0.5)]
    pub tau_min: f64,
    /// Largest per-row temperature.
    #[arg(long, default_value_t = 3.0)]
    pub tau_max: f64,
    /// Every row gets the same features and logits.
    #[arg(long)]
    pub identical: bool,
    /// Output dataset directory.
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub split: Vec<f64>,
    /// Seed for the split and every stochastic stage.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep softmax temperature 1 when the manifest records none.
    #[arg(long)]
    pub no_temperature: bool,
}

impl SplitArgs {
    pub fn fractions(&self) -> Result<[f64; 3], Failure> {
        triple("--split", &self.split)
    }
}

/// Exactly three comma-separated values.
pub fn triple<T: Copy>(flag: &str, v: &[T]) -> Result<[T; 3], Failure> {
    match v {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Failure::usage(format!(
            "{flag} takes 3 comma-separated values, got {}",
            v.len()
        ))),
    }
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    /// Add the top class to otherwise empty sets.
    #[arg(long)]
    pub nonempty: bool,
    /// Deterministic sets are the shortest ranking prefix reaching the
    /// threshold (implies --nonempty).
    #[arg(long)]
    pub mass_reaching: bool,
}

impl PolicyArgs {
    pub fn policy(&self) -> SetPolicy {
        if self.mass_reaching {
            SetPolicy::mass_reaching()
        } else {
            SetPolicy {
                rule: SetRule::ScoreAtMost,
                nonempty: self.nonempty,
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Regressor learning rate.
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    /// AdamW weight decay.
    #[arg(long, default_value_t = 1e-6)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Hidden layer width.
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            hidden_width: self.hidden,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Dataset directory.
    pub dataset: PathBuf,
    /// Target miscoverage in (0, 1).
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// aps, aps_rand, raps, raps_rand or naive.
    #[arg(long, default_value = "aps")]
    pub method: Method,
    /// RAPS penalty; tuned on the training fold when omitted.
    #[arg(long, requires = "raps_b")]
    pub raps_a: Option<f64>,
    /// RAPS free ranks; tuned on the training fold when omitted.
    #[arg(long, requires = "raps_a")]
    pub raps_b: Option<usize>,
    /// Rows of the training fold used for RAPS tuning.
    #[arg(long, default_value_t = 2000)]
    pub raps_tune_max: usize,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Output threshold JSON.
    #[arg(long, default_value = "threshold.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainCpsnArgs {
    /// Dataset directory.
    pub dataset: PathBuf,
    /// Target miscoverage in (0, 1).
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Output artifact JSON; the model is written next to it as `.mlp`.
    #[arg(long, default_value = "cpsn.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Threshold or CPSN artifact.
    pub artifact: PathBuf,
    /// Dataset directory to predict on.
    #[arg(long, conflicts_with = "scores")]
    pub dataset: Option<PathBuf>,
    /// Only the test fold of this split (same --split/--seed as training).
    #[arg(long, requires = "dataset")]
    pub test_only: bool,
    #[command(flatten)]
    pub split: SplitArgs,
    /// A single row of comma-separated probabilities (or logits with --logits).
    #[arg(
        long,
        value_delimiter = ',',
        allow_negative_numbers = true,
        required_unless_present = "dataset"
    )]
    pub scores: Option<Vec<f64>>,
    /// Treat --scores as logits, softmaxed at the artifact's temperature.
    #[arg(long, requires = "scores")]
    pub logits: bool,
    /// Comma-separated features of the --scores row (needed by CPSN).
    #[arg(
        long,
        value_delimiter = ',',
        allow_negative_numbers = true,
        requires = "scores"
    )]
    pub features: Option<Vec<f64>>,
    /// Write JSON lines here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory; omit to evaluate on fresh synthetic draws.
    pub dataset: Option<PathBuf>,
    /// Comma-separated methods.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "naive,aps,aps_rand,raps,raps_rand,cpsn"
    )]
    pub methods: Vec<Method>,
    /// Comma-separated miscoverage levels.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.05")]
    pub alphas: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1], conflicts_with = "counts")]
    pub split: Vec<f64>,
    /// Row budget for --split; all rows of a dataset by default.
    #[arg(long)]
    pub n: Option<usize>,
    /// Train, validation and test row counts.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    /// Seed for every stochastic stage.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for trials; defaults to available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Rows of the training fold used for RAPS tuning.
    #[arg(long, default_value_t = 2000)]
    pub raps_tune_max: usize,
    /// Keep softmax temperature 1 when no temperature is recorded.
    #[arg(long)]
    pub no_temperature: bool,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Synthetic task (used when no dataset is given).
    #[command(flatten)]
    pub synth: EvalSynthArgs,
    /// Also write the full JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalSynthArgs {
    /// Synthetic classes.
    #[arg(long = "synth-k", default_value_t = 11, value_parser = clap::value_parser!(u64).range(2..))]
    pub k: u64,
    /// Synthetic feature dimension.
    #[arg(long = "synth-d", default_value_t = 64, value_parser = clap::value_parser!(u64).range(2..))]
    pub d: u64,
    /// Synthetic mean separation.
    #[arg(long = "synth-separation", default_value_t = 3.0)]
    pub separation: f64,
    /// Turn off the per-row difficulty temperature.
    #[arg(long = "synth-homoscedastic")]
    pub homoscedastic: bool,
    /// Synthetic logit distortion.
    #[arg(long = "synth-distortion", default_value_t = 1.0)]
    pub distortion: f64,
    /// Seed of the synthetic class means.
    #[arg(long = "synth-seed", default_value_t = 0)]
    pub task_seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Dataset directory or artifact JSON.
    pub path: PathBuf,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Validation => 3,
            ErrorKind::Numerical => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

/// Resolves a relative output path against the output directory.
pub fn resolve(output_dir: Option<&Path>, path: &Path) -> PathBuf {
    match output_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let out = cli.output_dir.as_deref();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, out),
        Command::Calibrate(a) => commands::calibrate(a, out),
        Command::TrainCpsn(a) => commands::train_cpsn(a, out),
        Command::Predict(a) => commands::predict(a, out),
        Command::Eval(a) => commands::eval(a, out),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
