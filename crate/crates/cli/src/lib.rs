//! Library side of the `pdtr` command: configuration, subcommands and rendering.

pub mod commands;
pub mod config;
pub mod error;
pub mod render;

pub use config::{Overrides, RunConfig};
pub use error::CliError;
