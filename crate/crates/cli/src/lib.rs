//! Experiment runner for the `geocollapse` library: TOML configuration,
//! JSONL and CSV output, and the subcommands behind the `geocollapse` binary.

pub mod commands;
pub mod config;
pub mod output;
pub mod verify;

pub use commands::{run_command, CliError, Command};
pub use config::{load_config, parse_config, ConfigError, ExperimentConfig};
