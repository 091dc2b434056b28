//! File formats, configuration and commands behind the `fjlab` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod format;
pub mod verify;

pub use error::{CliError, CliResult};
