//! Command-line driver for the `fastfood` library: training and evaluation of
//! the reference and deep fried MNIST networks, microbenchmarks, kernel
//! approximation sweeps and SVD compression.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] fastfood::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for data and format problems, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        use fastfood::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config { .. }) => 2,
            CliError::Data(_) | CliError::Io(_) | CliError::Core(E::Format(_) | E::Io(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fastfood", version, about = "Fastfood layers: train, evaluate, benchmark, compress")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// MNIST directory; defaults to `data.dir` or `$FASTFOOD_DATA_DIR`.
    #[arg(long, global = true, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics.csv and model.ffck.
    Train(TrainArgs),
    /// Error rate of a checkpoint on the validation or test split.
    Eval(EvalArgs),
    /// Dense matvec against Fastfood forward; writes bench.csv.
    Bench(BenchArgs),
    /// RBF kernel approximation error, dense vs Fastfood projections; writes kernel.csv.
    Kernel(KernelArgs),
    /// Replace a dense layer by its truncated SVD; writes compressed.ffck and compress.csv.
    Compress(CompressArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long)]
    pub n_features: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    LenetRef,
    Deepfried,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Random,
    Adaptive,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BenchArgs {
    /// Comma-separated powers of two.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct KernelArgs {
    /// Comma-separated feature counts.
    #[arg(long, value_delimiter = ',')]
    pub n_features: Option<Vec<usize>>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CompressArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Index of the dense layer; the largest dense layer when omitted.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Target rank; half of the smaller dimension when omitted.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub fine_tune_epochs: Option<usize>,
}

/// Loads the config file (if any) and applies the global flags.
pub fn resolve_config(global: &GlobalArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &global.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(d) = &global.data_dir {
        cfg.data.dir = Some(d.clone());
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.global)?;
    std::fs::create_dir_all(&cli.global.out)
        .map_err(|e| CliError::Io(format!("{}: {e}", cli.global.out.display())))?;
    let out = &cli.global.out;
    match &cli.command {
        Command::Train(a) => commands::train(cfg, a, out).map(|_| ()),
        Command::Eval(a) => commands::eval(cfg, a, cli.global.config.is_some()).map(|e| {
            println!("error_rate,{e}");
        }),
        Command::Bench(a) => commands::bench(cfg, a, out).map(|_| ()),
        Command::Kernel(a) => commands::kernel(cfg, a, out).map(|_| ()),
        Command::Compress(a) => commands::compress(cfg, a, out).map(|_| ()),
    }
}

/// Parses `args` (including the program name), runs, and returns the exit
/// code: 0 on success, 2 on config errors, 3 on data and format errors.
pub fn run_args<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fastfood: {e}");
            e.exit_code()
        }
    }
}

pub fn main_with<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    ExitCode::from(run_args(args))
}
