//! `trn`: data generation, training, evaluation, streaming replay and
//! analysis from one configuration file.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 IO or file format
//! error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "trn", version, about = "Multi-scale temporal relation networks on frame features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.frames=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for data generation, initialisation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for every artifact of the run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and write TRNF feature files.
    GenData,
    /// Train a model and write the checkpoint, history and validation report.
    Train,
    /// Evaluate a checkpoint on the validation set.
    Eval,
    /// Replay validation videos through the streaming queue.
    Stream,
    /// Representative tuples, alignment, early recognition, order deltas and embeddings.
    Analyze,
    /// Finite-difference check of relation gradients; exits 3 if it fails.
    GradCheck,
    /// Train a pooling x frame-count grid over several seeds.
    ComparePool,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Stream => "stream",
            Command::Analyze => "analyze",
            Command::GradCheck => "grad-check",
            Command::ComparePool => "compare-pool",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(trn::Error),
    Numerical(String),
}

impl From<trn::Error> for CliError {
    fn from(e: trn::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(trn::Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Core(trn::Error::Io(_) | trn::Error::Format { .. } | trn::Error::Truncated { .. }) => 2,
            CliError::Core(trn::Error::Divergence { .. }) | CliError::Numerical(_) => 3,
            CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed, cli.out.as_deref())
        .map_err(CliError::from)
        .and_then(|config| commands::run(cli.command, &config));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("trn {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
