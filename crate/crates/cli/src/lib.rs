//! Command-line driver: flat run configuration and the pipeline commands.

pub mod commands;
pub mod config;

pub use commands::{run, Command};
pub use config::{ConfigError, RunConfig};
