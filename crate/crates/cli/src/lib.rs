//! Configuration-driven driver for segfed experiments. Each subcommand in
//! [`commands`] takes an [`ExperimentConfig`] with command-line overrides
//! already applied.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{ExperimentConfig, Mode, Overrides};
pub use error::CliError;
