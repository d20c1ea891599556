//! Experiment runner: generate synthetic problems, run the restart
//! schedule and its fixed-step baselines, compare runs and verify the
//! invariant suite.

pub mod commands;
pub mod config;
pub mod plot;

pub use commands::{
    cmd_compare, cmd_generate, cmd_run, cmd_verify, CliError, Comparison, Layout, Problem,
    RunSummary, Schedule,
};
pub use config::{ConfigError, ExperimentConfig};
