//! File formats, run configuration and subcommands around `coadapt-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use config::RunConfig;
pub use error::{CliError, Result};
