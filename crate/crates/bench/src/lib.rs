//! Synthetic data, a scan oracle and the tradeoff experiments.

pub mod experiments;
pub mod generate;
pub mod metrics;
pub mod oracle;
pub mod report;
pub mod workload;

pub use experiments::{run_experiment, BenchConfig, Experiment};
pub use generate::{Dataset, DatasetSpec, SkewSpec, SplomSpec};
