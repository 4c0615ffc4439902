//! Task-by-task runs: the two-stage merging method and its baselines.
//!
//! Seeds derived from the run seed:
//!
//! * initial parameters: `rng(seed, INIT, 0)`
//! * first-stage shuffling on task `t`: `derive(seed, SHUFFLE, t)`
//! * second-stage shuffling on task `t`: `derive(seed, SHUFFLE, t + 2^32)`
//! * representation and Fisher subsets: the run seed with the task index
//!
//! The `seed` fields of the configured schedules are ignored.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradproj::{self, EpsilonSchedule, SubspaceBasis};
use crate::laplace::{self, FisherDiag, FisherKind, PrecisionDiag};
use crate::merge::{self, MergeDiagnostics, MergeInputs, MergeStrategy};
use crate::nn::{self, Activation, Batch, GradientProjector, NetworkSpec};
use crate::params::ParamVector;
use crate::pipeline::metrics::{self, AccuracyMatrix, MetricReport};
use crate::pipeline::rundir::{self, Checkpoint, RunDir};
use crate::seed::{self, tag};
use crate::store;
use crate::taskgen::{Task, TaskStream};
use crate::train::{self, Trace, TrainSchedule};

const STAGE2_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherOptions {
    pub kind: FisherKind,
    /// Samples per estimate; `None` uses the whole training set.
    pub samples: Option<usize>,
    /// Constant precision before the first task.
    pub prior: f64,
}

impl Default for FisherOptions {
    fn default() -> Self {
        FisherOptions {
            kind: FisherKind::Empirical,
            samples: None,
            prior: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Biases on hidden layers. They are never projected.
    pub hidden_bias: bool,
    /// Gradient-projected stage; also trains task 1.
    pub stage1: TrainSchedule,
    /// Unconstrained stage.
    pub stage2: TrainSchedule,
    pub epsilon: EpsilonSchedule,
    /// Samples per task used to grow the projection basis; the whole
    /// training set when absent.
    pub representation_samples: Option<usize>,
    pub fisher: FisherOptions,
    pub merge: MergeStrategy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            hidden: vec![100],
            activation: Activation::Tanh,
            hidden_bias: false,
            stage1: TrainSchedule::default(),
            stage2: TrainSchedule::default(),
            epsilon: EpsilonSchedule::default(),
            representation_samples: None,
            fisher: FisherOptions::default(),
            merge: MergeStrategy::Adaptive,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::rejected("hidden widths must be positive"));
        }
        self.stage1.validate().map_err(|e| Error::rejected(format!("stage1: {e}")))?;
        self.stage2.validate().map_err(|e| Error::rejected(format!("stage2: {e}")))?;
        self.epsilon.validate()?;
        if self.representation_samples == Some(0) {
            return Err(Error::rejected("representation_samples must be at least 1"));
        }
        if self.fisher.samples == Some(0) {
            return Err(Error::rejected("fisher.samples must be at least 1"));
        }
        if !(self.fisher.prior >= 0.0 && self.fisher.prior.is_finite()) {
            return Err(Error::rejected(format!("fisher.prior {} must be finite and nonnegative", self.fisher.prior)));
        }
        self.merge.validate()
    }

    pub fn network(&self, stream: &TaskStream) -> Result<NetworkSpec> {
        NetworkSpec::mlp(
            stream.input_dim(),
            &self.hidden,
            self.activation,
            self.hidden_bias,
            stream.head_classes(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// Projected stage, unconstrained stage, closed-form merge.
    Became,
    /// Projected stage only.
    ProjectionOnly,
    /// Unconstrained stage only.
    Finetune,
    /// Row `t` is a model trained jointly on tasks `1..=t` from the initial parameters.
    Multitask,
}

impl RunKind {
    pub const ALL: [RunKind; 4] = [
        RunKind::Became,
        RunKind::ProjectionOnly,
        RunKind::Finetune,
        RunKind::Multitask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunKind::Became => "became",
            RunKind::ProjectionOnly => "projection_only",
            RunKind::Finetune => "finetune",
            RunKind::Multitask => "multitask",
        }
    }

    fn projects(self) -> bool {
        matches!(self, RunKind::Became | RunKind::ProjectionOnly)
    }
}

/// Which parameters a Fisher estimate was taken at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub checkpoint: String,
    pub norm: f64,
}

/// Cumulative training loss over tasks `1..=t` at points on the merge path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLosses {
    pub gp: f64,
    pub hat: f64,
    pub merged: f64,
    pub one_over_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub stage1_secs: f64,
    pub stage2_secs: f64,
    pub merge_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub lambda: Option<f64>,
    pub diagnostics: Option<MergeDiagnostics>,
    pub stage1: Option<Trace>,
    pub stage2: Option<Trace>,
    pub epsilon: Option<f64>,
    pub basis_ranks: Vec<usize>,
    /// Where the Fisher entering the merge coefficient was evaluated.
    pub fisher_merge_point: Option<EvalPoint>,
    /// Where the Fisher accumulated into the precision was evaluated.
    pub fisher_accumulate_point: Option<EvalPoint>,
    pub path_losses: Option<PathLosses>,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: RunKind,
    pub seed: u64,
    pub config: PipelineConfig,
    pub tasks: Vec<TaskRecord>,
    pub accuracy: AccuracyMatrix,
}

impl RunRecord {
    /// `(t, lambda, diagnostics)` for every merged task.
    pub fn lambda_trace(&self) -> Vec<(usize, Option<f64>, MergeDiagnostics)> {
        self.tasks
            .iter()
            .filter_map(|r| r.diagnostics.map(|d| (r.task, r.lambda, d)))
            .collect()
    }

    pub fn metrics(&self) -> Result<MetricReport> {
        metrics::metrics(&self.accuracy)
    }

    /// Copy with wall-clock fields zeroed.
    pub fn without_timings(&self) -> RunRecord {
        let mut r = self.clone();
        for t in &mut r.tasks {
            t.timings = Timings::default();
        }
        r
    }

    /// Writes the accuracy matrix, metrics, merge trace and record.
    pub fn write_reports(&self, dir: &RunDir) -> Result<()> {
        self.accuracy.write_csv(&dir.acc_matrix())?;
        self.metrics()?.write_csv(&dir.metrics())?;
        write_lambda_trace(&dir.lambda_trace(), &self.lambda_trace())?;
        rundir::write_json(&dir.record(), self)
    }
}

fn write_lambda_trace(path: &std::path::Path, trace: &[(usize, Option<f64>, MergeDiagnostics)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let fail = |e: csv::Error| Error::format(path.display().to_string(), e.to_string());
    w.write_record(["task", "lambda", "numerator", "denominator", "degenerate"]).map_err(fail)?;
    for (t, lambda, d) in trace {
        w.write_record([
            t.to_string(),
            lambda.map(|l| l.to_string()).unwrap_or_default(),
            d.numerator.to_string(),
            d.denominator.to_string(),
            d.degenerate.to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `lambda_trace.csv` back as `(t, lambda)`.
pub fn read_lambda_trace(path: &std::path::Path) -> Result<Vec<(usize, Option<f64>)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let t = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("lambda_trace.task", "not an integer"))?;
        let lambda = match rec.get(1).unwrap_or_default() {
            "" => None,
            s => Some(s.parse().map_err(|_| Error::format("lambda_trace.lambda", format!("`{s}`")))?),
        };
        out.push((t, lambda));
    }
    Ok(out)
}

/// Sum over `tasks` of the mean training loss.
pub fn cumulative_train_loss(spec: &NetworkSpec, params: &ParamVector, tasks: &[Task]) -> Result<f64> {
    tasks.iter().map(|task| task_train_loss(spec, params, task)).sum()
}

pub fn task_train_loss(spec: &NetworkSpec, params: &ParamVector, task: &Task) -> Result<f64> {
    let b = task.train.batch(task.id);
    let logits = nn::forward(spec, params, &b)?.logits;
    Ok(nn::cross_entropy(&logits, b.labels))
}

fn stage_schedule(base: &TrainSchedule, seed: u64, index: u64) -> TrainSchedule {
    base.with_seed(seed::derive(seed, tag::SHUFFLE, index))
}

fn test_accuracy(spec: &NetworkSpec, params: &ParamVector, task: &Task) -> Result<f64> {
    nn::accuracy(spec, params, &task.test.batch(task.id))
}

fn fisher_at(
    spec: &NetworkSpec,
    params: &ParamVector,
    task: &Task,
    config: &PipelineConfig,
    seed: u64,
) -> Result<FisherDiag> {
    let data = task.train.batch(task.id);
    let n = config.fisher.samples.unwrap_or(data.len()).min(data.len());
    laplace::fisher_diag(spec, params, &data, n, config.fisher.kind, seed)
}

/// Trains one task, recording test accuracy after the first epoch.
fn train_stage(
    spec: &NetworkSpec,
    start: &ParamVector,
    task: &Task,
    schedule: &TrainSchedule,
    projector: Option<&dyn GradientProjector>,
    epoch1: &mut Option<f64>,
) -> Result<(ParamVector, Trace, f64)> {
    let clock = Instant::now();
    let data = task.train.batch(task.id);
    let mut observer = |epoch: usize, p: &ParamVector| -> Result<()> {
        if epoch == 0 && epoch1.is_none() {
            *epoch1 = Some(test_accuracy(spec, p, task)?);
        }
        Ok(())
    };
    let (p, trace) = train::train_observed(spec, start, std::slice::from_ref(&data), schedule, projector, &mut observer)
        .map_err(|e| match e {
            Error::Numerical(m) => Error::numerical(format!("task {}: {m}", task.id)),
            other => other,
        })?;
    Ok((p, trace, clock.elapsed().as_secs_f64()))
}

pub fn run_became(stream: &TaskStream, config: &PipelineConfig, seed: u64, out: Option<&RunDir>) -> Result<RunRecord> {
    run(RunKind::Became, stream, config, seed, out)
}

pub fn run_baseline(
    kind: RunKind,
    stream: &TaskStream,
    config: &PipelineConfig,
    seed: u64,
    out: Option<&RunDir>,
) -> Result<RunRecord> {
    run(kind, stream, config, seed, out)
}

/// Runs `kind` over the whole stream, persisting artifacts to `out` when given.
pub fn run(kind: RunKind, stream: &TaskStream, config: &PipelineConfig, seed: u64, out: Option<&RunDir>) -> Result<RunRecord> {
    config.validate()?;
    let spec = config.network(stream)?;
    let record = match kind {
        RunKind::Multitask => run_multitask(&spec, stream, config, seed, out)?,
        _ => run_sequential(kind, &spec, stream, config, seed, out)?,
    };
    if let Some(dir) = out {
        record.write_reports(dir)?;
    }
    Ok(record)
}

fn run_sequential(
    kind: RunKind,
    spec: &NetworkSpec,
    stream: &TaskStream,
    config: &PipelineConfig,
    seed: u64,
    out: Option<&RunDir>,
) -> Result<RunRecord> {
    let mut params = spec.init_params(&mut seed::rng(seed, tag::INIT, 0));
    let mut basis = SubspaceBasis::empty(spec);
    let mut precision = PrecisionDiag::prior(spec.layout().clone(), config.fisher.prior)?;
    let mut acc = AccuracyMatrix::new(stream.len());
    let mut records = Vec::with_capacity(stream.len());
    let save = |path: std::path::PathBuf, p: &ParamVector| -> Result<()> {
        store::write_checkpoint(&path, p)
    };

    for task in stream.tasks() {
        let t = task.id;
        let mut rec = TaskRecord {
            task: t,
            lambda: None,
            diagnostics: None,
            stage1: None,
            stage2: None,
            epsilon: None,
            basis_ranks: Vec::new(),
            fisher_merge_point: None,
            fisher_accumulate_point: None,
            path_losses: None,
            timings: Timings::default(),
        };
        let mut epoch1 = None;

        let merged = if t == 1 {
            let schedule = stage_schedule(&config.stage1, seed, 1);
            let (p, trace, secs) = train_stage(spec, &params, task, &schedule, None, &mut epoch1)?;
            rec.stage1 = Some(trace);
            rec.timings.stage1_secs = secs;
            p
        } else {
            let gp = if kind.projects() {
                let schedule = stage_schedule(&config.stage1, seed, t as u64);
                let (p, trace, secs) = train_stage(spec, &params, task, &schedule, Some(&basis), &mut epoch1)?;
                rec.stage1 = Some(trace);
                rec.timings.stage1_secs = secs;
                if let Some(dir) = out {
                    save(dir.checkpoint(t, Checkpoint::Gp), &p)?;
                }
                Some(p)
            } else {
                None
            };
            let hat = if matches!(kind, RunKind::Became | RunKind::Finetune) {
                let start = gp.as_ref().unwrap_or(&params);
                let schedule = stage_schedule(&config.stage2, seed, t as u64 + STAGE2_OFFSET);
                let (p, trace, secs) = train_stage(spec, start, task, &schedule, None, &mut epoch1)?;
                rec.stage2 = Some(trace);
                rec.timings.stage2_secs = secs;
                if let Some(dir) = out {
                    save(dir.checkpoint(t, Checkpoint::Hat), &p)?;
                }
                Some(p)
            } else {
                None
            };
            match (gp, hat) {
                (Some(gp), Some(hat)) => {
                    let clock = Instant::now();
                    let fisher_hat = fisher_at(spec, &hat, task, config, seed)?;
                    rec.fisher_merge_point = Some(EvalPoint {
                        checkpoint: Checkpoint::Hat.name().to_string(),
                        norm: hat.norm(),
                    });
                    let inputs = MergeInputs {
                        theta_gp: &gp,
                        theta_hat: &hat,
                        fisher_hat: &fisher_hat,
                        precision_prev: &precision,
                    };
                    let result = merge::strategy_merge(config.merge, t, &inputs)?;
                    if let Some(l) = result.lambda {
                        debug_assert!((0.0..=1.0).contains(&l));
                    }
                    let seen = &stream.tasks()[..t];
                    let one_over_t = merge::merge(&gp, &hat, 1.0 / t as f64)?;
                    rec.path_losses = Some(PathLosses {
                        gp: cumulative_train_loss(spec, &gp, seen)?,
                        hat: cumulative_train_loss(spec, &hat, seen)?,
                        merged: cumulative_train_loss(spec, &result.merged, seen)?,
                        one_over_t: cumulative_train_loss(spec, &one_over_t, seen)?,
                    });
                    rec.lambda = result.lambda;
                    rec.diagnostics = Some(result.diagnostics);
                    if let Some(dir) = out {
                        fisher_hat.save(&dir.fisher(t))?;
                    }
                    rec.timings.merge_secs = clock.elapsed().as_secs_f64();
                    log::info!(
                        "task {t}: lambda {:?} (degenerate {})",
                        result.lambda,
                        result.diagnostics.degenerate
                    );
                    result.merged
                }
                (Some(p), None) | (None, Some(p)) => p,
                (None, None) => unreachable!("every sequential kind trains at least one stage"),
            }
        };

        if kind == RunKind::Became {
            let clock = Instant::now();
            let fisher_star = fisher_at(spec, &merged, task, config, seed)?;
            rec.fisher_accumulate_point = Some(EvalPoint {
                checkpoint: Checkpoint::Merged.name().to_string(),
                norm: merged.norm(),
            });
            precision = laplace::accumulate(&precision, &fisher_star)?;
            if let Some(dir) = out {
                if t == 1 {
                    fisher_star.save(&dir.fisher(t))?;
                }
                precision.save(&dir.precision(t))?;
            }
            rec.timings.merge_secs += clock.elapsed().as_secs_f64();
        }

        if kind.projects() {
            let eps = gradproj::epsilon_for_task(&config.epsilon, t);
            let n = config.representation_samples.unwrap_or(task.train.len()).min(task.train.len());
            let reps = gradproj::collect_representations(spec, &merged, &task.train, t, n, seed)?;
            gradproj::update_basis(&mut basis, &reps, eps)?;
            rec.epsilon = Some(eps);
            rec.basis_ranks = basis.ranks();
            if let Some(dir) = out {
                let (bin, side) = dir.basis(t);
                basis.save(&bin, &side)?;
            }
        }

        for prev in &stream.tasks()[..t] {
            acc.set(t, prev.id, test_accuracy(spec, &merged, prev)?)?;
        }
        if let Some(a) = epoch1 {
            acc.set_epoch1(t, a)?;
        }
        if let Some(dir) = out {
            save(dir.checkpoint(t, Checkpoint::Merged), &merged)?;
        }
        log::info!("{} task {t}: A[{t}][{t}] = {:?}", kind.name(), acc.get(t, t));
        params = merged;
        records.push(rec);
    }

    Ok(RunRecord {
        kind,
        seed,
        config: config.clone(),
        tasks: records,
        accuracy: acc,
    })
}

fn run_multitask(
    spec: &NetworkSpec,
    stream: &TaskStream,
    config: &PipelineConfig,
    seed: u64,
    out: Option<&RunDir>,
) -> Result<RunRecord> {
    let init = spec.init_params(&mut seed::rng(seed, tag::INIT, 0));
    let mut acc = AccuracyMatrix::new(stream.len());
    let mut records = Vec::with_capacity(stream.len());
    for t in 1..=stream.len() {
        let seen = &stream.tasks()[..t];
        let parts: Vec<Batch<'_>> = seen.iter().map(|task| task.train.batch(task.id)).collect();
        let schedule = stage_schedule(&config.stage1, seed, t as u64);
        let clock = Instant::now();
        let (p, trace) = train::train_observed(spec, &init, &parts, &schedule, None, &mut |_, _| Ok(()))?;
        for task in seen {
            acc.set(t, task.id, test_accuracy(spec, &p, task)?)?;
        }
        if let Some(dir) = out {
            store::write_checkpoint(&dir.checkpoint(t, Checkpoint::Merged), &p)?;
        }
        records.push(TaskRecord {
            task: t,
            lambda: None,
            diagnostics: None,
            stage1: Some(trace),
            stage2: None,
            epsilon: None,
            basis_ranks: Vec::new(),
            fisher_merge_point: None,
            fisher_accumulate_point: None,
            path_losses: None,
            timings: Timings {
                stage1_secs: clock.elapsed().as_secs_f64(),
                ..Timings::default()
            },
        });
    }
    let diag = (1..=stream.len()).map(|i| acc.require(i, i)).collect::<Result<Vec<_>>>()?;
    acc.set_upper_bound(diag)?;
    Ok(RunRecord {
        kind: RunKind::Multitask,
        seed,
        config: config.clone(),
        tasks: records,
        accuracy: acc,
    })
}

/// Upper-bound accuracies `A*_i` from a multitask record.
pub fn upper_bound_from(multitask: &RunRecord) -> Result<Vec<f64>> {
    if multitask.kind != RunKind::Multitask {
        return Err(Error::rejected("upper bounds come from a multitask run"));
    }
    (1..=multitask.accuracy.tasks()).map(|i| multitask.accuracy.require(i, i)).collect()
}
