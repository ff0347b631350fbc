mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<mfdiff_core::error::Error> for CliError {
    fn from(e: mfdiff_core::error::Error) -> Self {
        match e {
            mfdiff_core::error::Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "mfdiff", version, about = "Multi-fidelity diffusion surrogates for PDE solution fields")]
struct Cli {
    /// Worker threads for data generation, training and sampling.
    #[arg(long, global = true, env = "MFDIFF_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve a PDE at several mesh sizes and store the multi-fidelity dataset.
    GenData(GenDataArgs),
    /// Train a score model from a JSON experiment config.
    Train(TrainArgs),
    /// Draw predictions from a trained checkpoint.
    Sample(SampleArgs),
    /// Score predictions against reference solutions.
    Eval(EvalArgs),
    /// Run data generation, training, sampling and evaluation from one config.
    Reproduce(ReproduceArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// poisson, heat or burgers.
    #[arg(long)]
    pub pde: String,
    /// Mesh sizes, lowest fidelity first.
    #[arg(long, value_delimiter = ',', required = true)]
    pub fidelities: Vec<usize>,
    /// Examples per fidelity.
    #[arg(long, value_delimiter = ',', required = true)]
    pub counts: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub dataset_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Experiment directory; defaults to `out_dir` or `runs/<config name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the latest checkpoint in the experiment directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Checkpoint file, or a directory searched for the latest checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Refuse the checkpoint unless it matches this experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// PDE parameters, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "test_set")]
    pub x: Option<Vec<f64>>,
    /// Predict every example of this dataset instead of a single `--x`.
    #[arg(long)]
    pub test_set: Option<PathBuf>,
    /// Mesh size to condition on; the highest training fidelity by default.
    #[arg(long)]
    pub fidelity: Option<usize>,
    /// Slice coordinates for slice-conditioned models.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub tau: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1)]
    pub ensemble_k: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub corrector_steps: usize,
    #[arg(long, default_value_t = 0.16)]
    pub snr: f64,
    #[arg(long)]
    pub denoise: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub method_tag: Option<String>,
    /// Output `.f32` file for `--x`, or directory for `--test-set`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Prediction directory written by `sample --test-set`; repeat once per run.
    #[arg(long = "pred", required = true)]
    pub preds: Vec<PathBuf>,
    /// Dataset holding the reference solutions.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Examples rendered as images.
    #[arg(long, default_value_t = 3)]
    pub images: usize,
}

#[derive(Args, Debug)]
pub struct ReproduceArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Reproduce(a) => commands::reproduce(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
