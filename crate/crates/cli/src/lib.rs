//! Library side of the `spt` command-line driver: run configuration and the
//! command implementations.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, Result};
