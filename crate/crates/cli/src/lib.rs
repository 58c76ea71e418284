//! Configuration shared by the `fvv` commands.

pub mod config;

pub use config::{load_config, parse_config, Config, ConfigError, Resolution, CONFIG_ENV};
