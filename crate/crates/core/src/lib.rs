//! Continual learning with two-stage training and closed-form Bayesian
//! merging of checkpoints.
//!
//! Each new task is first trained with gradients projected away from the
//! input subspaces of earlier tasks, then trained freely from that point.
//! The two checkpoints are merged along the segment joining them with a
//! coefficient computed from diagonal Fisher and precision estimates.

// `!(x >= 0.0)` deliberately rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradproj;
pub mod lab;
pub mod laplace;
pub mod merge;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod seed;
pub mod store;
pub mod taskgen;
pub mod train;

pub use error::{Error, Result};
pub use gradproj::{EpsilonSchedule, SubspaceBasis};
pub use laplace::{FisherDiag, FisherKind, PrecisionDiag};
pub use merge::{MergeDiagnostics, MergeStrategy};
pub use nn::{Activation, NetworkSpec};
pub use params::{Layout, ParamVector};
pub use pipeline::{AccuracyMatrix, MetricReport, PipelineConfig, RunKind, RunRecord};
pub use taskgen::{Dataset, Task, TaskStream};
pub use train::TrainSchedule;
