//! Experiment runner for `nctorus`: configs, pipelines, report files and the
//! acceptance suite behind the `nct` binary.

pub mod config;
pub mod criteria;
pub mod output;
pub mod pipelines;

pub use config::{ConfigError, ExperimentConfig};
pub use pipelines::{run, Report};
