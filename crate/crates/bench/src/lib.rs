//! Experiment harness for the federated localization simulator: TOML
//! configs, runs and sweeps, evaluation reports, checkpoints and a
//! synthetic dataset generator.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod surrogate;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, sweep, RunSummary};
pub use metrics::MetricsReport;
