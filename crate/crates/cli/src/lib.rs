//! Command-line front end for `indiff-core`: run configurations, command
//! drivers and artifact writers.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Command, RunOptions};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
