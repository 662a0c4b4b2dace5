//! Config-driven experiment runner for `coopdyn-core`.

pub mod config;
pub mod run;

pub use config::{parse_config, parse_config_with, ConfigError, ExperimentConfig, Overrides};
pub use run::{run_experiment, RunError};
