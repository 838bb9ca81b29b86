//! `risp`: dataset generation, predictor training, evaluation, inverse problems and ablations.
//!
//! Exit codes: 0 success, 2 bad arguments, 3 I/O or corrupt input, 4 internal failure.

mod commands;
mod config;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use risp::data::KConfigs;
use risp::sim::EnvId;
use risp::tasks::{Method, Sampling};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "risp", version, about = "Rendering-invariant state prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a domain-randomized dataset with precomputed rendering sensitivities.
    GenData(GenDataArgs),
    /// Train a state predictor on a dataset.
    Train(TrainArgs),
    /// Evaluate state estimation on a dataset.
    Eval(EvalArgs),
    /// Identify system parameters from a reference video.
    Sysid(FitArgs),
    /// Recover the action sequence behind a reference video.
    Imitate(FitArgs),
    /// Find actions that reach the state shown in a target image.
    Control(FitArgs),
    /// Test error per epoch for 1, 10 and fresh rendering configurations, with and without the regularizer.
    AblateConfigs(AblateConfigsArgs),
    /// System-identification loss landscape under different frame samplings.
    AblateSampling(AblateSamplingArgs),
    /// Dataset manifest utilities.
    Manifest {
        #[command(subcommand)]
        command: ManifestCommand,
    },
}

#[derive(Subcommand)]
enum ManifestCommand {
    /// Print the manifest of a dataset file as JSON.
    Dump {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainArg {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RegArg {
    None,
    Full,
    Fast,
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value = "quad2d")]
    pub env: EnvId,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Number of distinct rendering configurations, or `fresh` for a new one per sample.
    #[arg(long, default_value = "fresh")]
    pub k_configs: KConfigs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DomainArg::Source)]
    pub domain: DomainArg,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = RegArg::Fast)]
    pub reg: RegArg,
    /// Experiment config (JSON); --reg and --seed take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-epoch evaluation set; the held-out fifth of --data when absent.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Continue from a training-state file written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs of this invocation (resumable).
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// ours, ours_no_grad, average or random.
    #[arg(long, default_value = "ours")]
    pub method: Method,
    /// Predictor checkpoint for the network methods.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training set the average baseline is computed from.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct FitArgs {
    #[arg(long, default_value = "quad2d")]
    pub env: EnvId,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "oracle,ours,ours_no_grad,pixelwise,perceptual,average,random"
    )]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Predictor trained with the regularizer (method `ours`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Predictor trained without it (method `ours_no_grad`).
    #[arg(long)]
    pub checkpoint_no_grad: Option<PathBuf>,
    /// Reference frames compared: stride<k>, endpoints or first-middle.
    #[arg(long, default_value = "stride1")]
    pub sampling: Sampling,
    /// Experiment config (JSON) holding the optimizer settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct AblateConfigsArgs {
    #[arg(long, default_value = "quad2d")]
    pub env: EnvId,
    /// Samples per training dataset (before the 8:2 split).
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Size of the unseen-rendering test set.
    #[arg(long, default_value_t = 400)]
    pub test_n: usize,
    #[arg(long, value_enum, default_value_t = RegArg::Fast)]
    pub reg: RegArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct AblateSamplingArgs {
    #[arg(long, default_value = "rod")]
    pub env: EnvId,
    #[arg(long, default_value = "ours")]
    pub method: Method,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of evenly spaced parameter values over the sampling range.
    #[arg(long, default_value_t = 61)]
    pub grid: usize,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "stride1,stride5,endpoints,first-middle"
    )]
    pub samplings: Vec<Sampling>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<risp::data::DataError> for CliError {
    fn from(e: risp::data::DataError) -> Self {
        match e {
            risp::data::DataError::EnvMismatch { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<risp::net::CheckpointError> for CliError {
    fn from(e: risp::net::CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<risp::tasks::FitError> for CliError {
    fn from(e: risp::tasks::FitError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sysid(a) => commands::fit_task(risp::tasks::Task::Sysid, "sysid", &a),
        Command::Imitate(a) => commands::fit_task(risp::tasks::Task::Imitation, "imitate", &a),
        Command::Control(a) => commands::fit_task(risp::tasks::Task::Control, "control", &a),
        Command::AblateConfigs(a) => commands::ablate_configs(&a),
        Command::AblateSampling(a) => commands::ablate_sampling(&a),
        Command::Manifest {
            command: ManifestCommand::Dump { data },
        } => commands::manifest_dump(&data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
