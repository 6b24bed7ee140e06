//! Configuration and command implementations behind the `ul2` binary.

pub mod commands;
pub mod config;

pub use config::{load_config, parse_config, ConfigError, RunConfig};
