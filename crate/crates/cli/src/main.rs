use std::path::PathBuf;

use clap::{Parser, Subcommand};
use geocollapse_cli::{load_config, parse_config, run_command, CliError, Command};

#[derive(Parser)]
#[command(name = "geocollapse", version, about = "Geometric collapse experiments on dense networks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed, overriding `train.seed` and `sweep.seeds`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one network and log metrics to JSONL.
    Train(Common),
    /// Train a grid over one hyperparameter and several seeds.
    Sweep(Common),
    /// Train on the source classes and evaluate few-shot transfer.
    Transfer(Common),
    /// Compare sampled GC estimators with the empirical GC of a trained network.
    EstimateGc(Common),
    /// Evaluate the collapse, generalization and transfer bounds.
    Bounds(Common),
    /// Check the numerical core against independent computations.
    Verify(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (command, common) = match cli.command {
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
        Cmd::Transfer(c) => (Command::Transfer, c),
        Cmd::EstimateGc(c) => (Command::EstimateGc, c),
        Cmd::Bounds(c) => (Command::Bounds, c),
        Cmd::Verify(c) => (Command::Verify, c),
    };
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None if command == Command::Verify => parse_config("")?,
        None => return Err(geocollapse_cli::ConfigError::Missing("--config".into()).into()),
    };
    if let Some(dir) = common.out {
        cfg.output.dir = dir;
    }
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    run_command(&cfg, command)
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
