//! Pipeline commands behind the `uavnav` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, Kind};
