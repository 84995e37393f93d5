//! File formats, configuration and the command-line driver around
//! `protomiss-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod embfile;
pub mod error;
pub mod ledger;
pub mod manifest;
pub mod report;

pub use commands::{main_with_args, run, Cli};
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
