//! Task-by-task runs, their artifacts, and the metrics computed from them.

pub mod metrics;
pub mod rundir;
pub mod runner;
pub mod sweep;

pub use metrics::{AccuracyMatrix, MetricReport};
pub use rundir::{Checkpoint, RunDir};
pub use runner::{run, run_baseline, run_became, FisherOptions, PipelineConfig, RunKind, RunRecord, TaskRecord};
pub use sweep::{lambda_sweep_experiment, landscape, SweepReport};
