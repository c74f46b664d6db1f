//! Command implementations behind the `vrdiff` binary.

pub mod bench;
pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod features;
pub mod validate;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
