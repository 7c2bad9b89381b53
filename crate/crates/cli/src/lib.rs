//! Command-line runner for the crowd-aversion experiments: configuration
//! parsing, the two-arm comparison and artifact output.

pub mod config;
pub mod error;
pub mod run;

pub use config::{parse_config, parse_config_str, Arm, ArmSelection, Experiment, RunConfig};
pub use error::{ConfigError, RunError};
pub use run::{execute, run_experiment, ArmRun, RunOptions, RunReport, RunSummary, Timings};
