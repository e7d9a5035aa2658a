//! Command-line surface for Neural-PCA: configuration, checkpoints and the
//! `npca` subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{run, Cli, Command};
pub use config::{DatasetSpec, RunConfig};
pub use error::CliError;
