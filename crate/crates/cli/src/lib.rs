//! Command-line driver: dataset generation, training, λ sweeps, probe
//! evaluation, embedding export and gradient self-checks.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

/// A failure with the exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    #[error("usage error: {0}")]
    Usage(String),
    /// Unreadable, malformed or incompatible input (exit 2).
    #[error("data error: {0}")]
    Data(String),
    /// A numerical self-check failed (exit 3).
    #[error("diagnostic failure: {0}")]
    Diagnostic(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Diagnostic(_) => 3,
        }
    }

    pub fn from_core(e: debias::Error) -> Self {
        use debias::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidConfig(_) | E::InvalidHyperparameter { .. } | E::InvalidSigma(_) => CliError::Usage(msg),
            E::NonScalarLoss(_) => CliError::Diagnostic(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<debias::Error> for CliError {
    fn from(e: debias::Error) -> Self {
        CliError::from_core(e)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "debias",
    version,
    about = "Confounder-invariant autoencoder experiments",
    after_help = "Any configuration key can be overridden with --section.key=value, e.g. --train.lambda=50."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint to load; defaults to `<out_dir>/checkpoint.dbck`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into `<out_dir>/dataset.dbds`.
    GenData(ConfigArgs),
    /// Train one model at `train.lambda`.
    Train(ConfigArgs),
    /// Pretrain once, branch per λ in `sweep`, and tabulate both probes.
    Sweep(ConfigArgs),
    /// Run the kNN probes on a checkpoint's codes.
    Eval(CheckpointArgs),
    /// Export a t-SNE embedding of a checkpoint's codes.
    Embed(CheckpointArgs),
    /// Finite-difference check of every differentiable operator.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Adds a case with a deliberately wrong backward rule.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Splits `--section.key=value` overrides from the arguments clap sees.
pub fn split_overrides<I: IntoIterator<Item = OsString>>(args: I) -> (Vec<OsString>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.to_str() {
            Some(s) if config::is_override(s) => overrides.push(s.to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

/// Parses and runs one invocation. Clap's own errors (including `--help`)
/// are returned unchanged so the caller can print them.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> Result<Result<(), CliError>, clap::Error> {
    let (rest, overrides) = split_overrides(args);
    let cli = Cli::try_parse_from(rest)?;
    Ok(dispatch(cli.command, &overrides))
}

fn dispatch(command: Command, overrides: &[String]) -> Result<(), CliError> {
    let resolve = |c: &ConfigArgs| RunConfig::resolve(c.config.as_deref(), overrides);
    match command {
        Command::GenData(c) => commands::gen_data(&resolve(&c)?),
        Command::Train(c) => commands::train(&resolve(&c)?),
        Command::Sweep(c) => commands::sweep(&resolve(&c)?),
        Command::Eval(c) => commands::eval(&resolve(&c.config)?, c.checkpoint.as_deref()),
        Command::Embed(c) => commands::embed(&resolve(&c.config)?, c.checkpoint.as_deref()),
        Command::Gradcheck { seed, inject_fault } => {
            if !overrides.is_empty() {
                return Err(CliError::Usage("gradcheck takes no configuration overrides".into()));
            }
            commands::gradcheck(seed, inject_fault)
        }
    }
}
