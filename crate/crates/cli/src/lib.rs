//! `tempodet` command-line driver.

pub mod ablate;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tempodet_core::error::Error;

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_MODEL: i32 = 4;
pub const EXIT_DATA: i32 = 5;
pub const EXIT_VERIFY: i32 = 6;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(Error),
    Verification(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Verification(_) => EXIT_VERIFY,
            CliError::Core(e) => match e {
                Error::Validation { .. } => EXIT_CONFIG,
                Error::NonFinite(_) | Error::Diverged { .. } => EXIT_NUMERIC,
                Error::Shape { .. } | Error::ModelFormat(_) | Error::StaleCache => EXIT_MODEL,
                Error::Io { .. }
                | Error::UnrecognizedFormat { .. }
                | Error::PayloadLength { .. }
                | Error::HeaderParse { .. }
                | Error::Empty(_)
                | Error::LabelOutOfRange { .. } => EXIT_DATA,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tempodet", version, about = "Temporal action detection with a multi-task 3D ConvNet")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "TEMPODET_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic video dataset.
    Gen(GenArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Run sliding-window detection over every video of a dataset.
    Detect(DetectArgs),
    /// Score detections against a dataset's annotations.
    Eval(EvalArgs),
    /// Train and evaluate ablation variants over several seeds.
    Ablate(AblateArgs),
    /// Check every backward pass against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Run configuration (JSON); its `dataset` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `dataset.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `dataset.num_videos`.
    #[arg(long)]
    pub num_videos: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output model file.
    #[arg(long)]
    pub out_model: PathBuf,
    /// Output training log (CSV).
    #[arg(long)]
    pub log: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Dataset directory to run on.
    #[arg(long)]
    pub data: PathBuf,
    /// Model file written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Output detections (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration (JSON); `windows`, `augment` and `postproc` are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset whose annotations define the duration prior.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    pub data: PathBuf,
    /// Detections file written by `detect`.
    #[arg(long)]
    pub det: PathBuf,
    /// Comma-separated tIoU thresholds (overrides `eval.tiou_thresholds`).
    #[arg(long, value_delimiter = ',')]
    pub tiou: Option<Vec<f64>>,
    /// Output report CSV; a JSON mirror is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Variant to run, repeatable: full, no-proposal, no-regression,
    /// fc8-only, shear:<deg>, balance:<categorization|proposal>.
    #[arg(long = "variant", required = true)]
    pub variants: Vec<String>,
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset directory used for scoring.
    #[arg(long)]
    pub test_data: PathBuf,
    /// Base run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Output CSV with one row per (variant, seed) plus medians.
    #[arg(long)]
    pub out: PathBuf,
    /// Keep models, logs and detections of every run here.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed for random parameters and inputs.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Sampled coordinates of the full-network check.
    #[arg(long, default_value_t = 20)]
    pub coordinates: usize,
    /// Corrupt the convolution backward pass (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: thread pool already initialised: {e}");
        }
    }
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Detect(a) => commands::detect(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => ablate::run(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
