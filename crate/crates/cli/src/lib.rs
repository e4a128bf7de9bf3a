//! Command-line front end for training, evaluating, pruning and exporting
//! neural attentive circuits.

pub mod commands;
pub mod config;

pub use commands::CliError;
pub use config::{ConfigError, RunConfig};
