//! Experiment runner behind the command-line tool: configuration, the
//! synthetic data recipe, baseline/shift/closed-loop experiments, metric
//! files and property checks.

pub mod checks;
pub mod commands;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;

pub use config::{ConfigError, ExperimentConfig, ENV_PREFIX};
pub use metrics::{LatencyReport, MetricsPhase, MetricsRow, MetricsTable};
