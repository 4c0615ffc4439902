//! Offline replays of a finished run: loss along the merge path and on the
//! plane through three checkpoints.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::laplace::{FisherDiag, PrecisionDiag};
use crate::merge::{self, MergeDiagnostics, MergeInputs};
use crate::nn::NetworkSpec;
use crate::params::ParamVector;
use crate::pipeline::rundir::{Checkpoint, RunDir};
use crate::pipeline::runner::task_train_loss;
use crate::store;
use crate::taskgen::TaskStream;

pub const SWEEP_STEP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// Mean training loss of tasks `1..=t`.
    pub task_losses: Vec<f64>,
    pub cumulative: f64,
    /// Quadratic model of `cumulative` built from the merge diagnostics.
    pub surrogate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub task: usize,
    pub lambda_star: f64,
    pub diagnostics: MergeDiagnostics,
    pub rows: Vec<SweepRow>,
    pub cumulative_argmin: f64,
    pub surrogate_argmin: f64,
    /// Grid indices where the discrete second difference of `cumulative` is negative.
    pub convexity_violations: Vec<usize>,
}

impl SweepReport {
    /// Fraction of interior grid points with a nonnegative second difference.
    pub fn convex_fraction(&self) -> f64 {
        let interior = self.rows.len().saturating_sub(2);
        if interior == 0 {
            return 1.0;
        }
        1.0 - self.convexity_violations.len() as f64 / interior as f64
    }

    /// Whether the current task's loss never increases toward `lambda = 1`
    /// beyond `slack`.
    pub fn task_loss_nonincreasing(&self, slack: f64) -> bool {
        self.rows.windows(2).all(|w| {
            let a = *w[0].task_losses.last().expect("at least one task");
            let b = *w[1].task_losses.last().expect("at least one task");
            b <= a + slack
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let fail = |e: csv::Error| Error::format(path.display().to_string(), e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(fail)?;
        let mut header = vec!["lambda".to_string()];
        header.extend((1..=self.task).map(|i| format!("loss_task_{i}")));
        header.extend(["cumulative", "surrogate", "lambda_star"].map(String::from));
        w.write_record(&header).map_err(fail)?;
        for r in &self.rows {
            let mut rec = vec![format!("{:.2}", r.lambda)];
            rec.extend(r.task_losses.iter().map(|v| v.to_string()));
            rec.push(r.cumulative.to_string());
            rec.push(r.surrogate.to_string());
            rec.push(self.lambda_star.to_string());
            w.write_record(&rec).map_err(fail)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn load_checkpoint(dir: &RunDir, t: usize, which: Checkpoint) -> Result<ParamVector> {
    let path = dir.checkpoint(t, which);
    dir.require(&path)?;
    store::read_checkpoint(&path)
}

fn check_task(stream: &TaskStream, t: usize) -> Result<()> {
    if t < 2 {
        return Err(Error::rejected(format!("task {t} has no merge; merging starts at task 2")));
    }
    if t > stream.len() {
        return Err(Error::rejected(format!("task {t} beyond a stream of {} tasks", stream.len())));
    }
    Ok(())
}

fn losses(spec: &NetworkSpec, params: &ParamVector, stream: &TaskStream, t: usize) -> Result<Vec<f64>> {
    stream.tasks()[..t].iter().map(|task| task_train_loss(spec, params, task)).collect()
}

/// Loss of every learned task along `(1 - lambda) gp + lambda hat` for task `t`,
/// replayed from the checkpoints in `dir`.
pub fn lambda_sweep_experiment(
    spec: &NetworkSpec,
    stream: &TaskStream,
    dir: &RunDir,
    t: usize,
    step: f64,
) -> Result<SweepReport> {
    check_task(stream, t)?;
    let gp = load_checkpoint(dir, t, Checkpoint::Gp)?;
    let hat = load_checkpoint(dir, t, Checkpoint::Hat)?;
    for path in [dir.fisher(t), dir.precision(t - 1)] {
        dir.require(&path)?;
    }
    let fisher = FisherDiag::load(&dir.fisher(t))?;
    let precision = PrecisionDiag::load(&dir.precision(t - 1))?;
    if gp.layout() != spec.layout() {
        return Err(Error::rejected("checkpoints do not match the configured network"));
    }
    let (lambda_star, diagnostics) = merge::adaptive_lambda(&MergeInputs {
        theta_gp: &gp,
        theta_hat: &hat,
        fisher_hat: &fisher,
        precision_prev: &precision,
    })?;

    // anchor the quadratic model at the known endpoint losses
    let at_gp = losses(spec, &gp, stream, t)?;
    let at_hat = losses(spec, &hat, stream, t)?;
    let offset = at_hat[t - 1] + at_gp[..t - 1].iter().sum::<f64>();

    let mut rows = Vec::new();
    for lambda in merge::lambda_grid(step)? {
        let p = merge::merge(&gp, &hat, lambda)?;
        let task_losses = losses(spec, &p, stream, t)?;
        let cumulative = task_losses.iter().sum();
        if !f64::is_finite(cumulative) {
            return Err(Error::numerical(format!("cumulative loss at lambda = {lambda} is not finite")));
        }
        rows.push(SweepRow {
            lambda,
            task_losses,
            cumulative,
            surrogate: offset + diagnostics.surrogate(lambda),
        });
    }
    let argmin = |f: &dyn Fn(&SweepRow) -> f64| {
        let mut best = 0;
        for (i, r) in rows.iter().enumerate() {
            if f(r) < f(&rows[best]) {
                best = i;
            }
        }
        rows[best].lambda
    };
    let cumulative_argmin = argmin(&|r| r.cumulative);
    let surrogate_argmin = argmin(&|r| r.surrogate);
    let scale = rows.iter().map(|r| r.cumulative.abs()).fold(0.0, f64::max);
    let convexity_violations = (1..rows.len().saturating_sub(1))
        .filter(|&k| rows[k - 1].cumulative - 2.0 * rows[k].cumulative + rows[k + 1].cumulative < -1e-12 * scale)
        .collect::<Vec<_>>();
    if !convexity_violations.is_empty() {
        log::warn!(
            "task {t}: cumulative loss has negative curvature at {} of {} grid points",
            convexity_violations.len(),
            rows.len() - 2
        );
    }
    Ok(SweepReport {
        task: t,
        lambda_star,
        diagnostics,
        rows,
        cumulative_argmin,
        surrogate_argmin,
        convexity_violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapePoint {
    pub alpha: f64,
    pub beta: f64,
    pub task_losses: Vec<f64>,
    pub cumulative: f64,
}

/// Losses on `origin + alpha (gp - origin) + beta (hat - origin)` with
/// `origin` the merged checkpoint of task `t - 1`; both coordinates range over
/// `[-margin, 1 + margin]` in `resolution` steps.
pub fn landscape(
    spec: &NetworkSpec,
    stream: &TaskStream,
    dir: &RunDir,
    t: usize,
    resolution: usize,
    margin: f64,
) -> Result<Vec<LandscapePoint>> {
    check_task(stream, t)?;
    if resolution < 2 {
        return Err(Error::rejected("landscape resolution must be at least 2"));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::rejected(format!("landscape margin {margin} must be finite and nonnegative")));
    }
    let origin = load_checkpoint(dir, t - 1, Checkpoint::Merged)?;
    let u = load_checkpoint(dir, t, Checkpoint::Gp)?.sub(&origin)?;
    let v = load_checkpoint(dir, t, Checkpoint::Hat)?.sub(&origin)?;
    let coord = |k: usize| -margin + (1.0 + 2.0 * margin) * k as f64 / (resolution - 1) as f64;
    let mut out = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let (alpha, beta) = (coord(i), coord(j));
            let mut p = origin.clone();
            p.axpy(alpha, &u)?;
            p.axpy(beta, &v)?;
            let task_losses = losses(spec, &p, stream, t)?;
            let cumulative = task_losses.iter().sum();
            out.push(LandscapePoint {
                alpha,
                beta,
                task_losses,
                cumulative,
            });
        }
    }
    Ok(out)
}

pub fn write_landscape_csv(path: &Path, t: usize, points: &[LandscapePoint]) -> Result<()> {
    let fail = |e: csv::Error| Error::format(path.display().to_string(), e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    let mut header = vec!["alpha".to_string(), "beta".to_string()];
    header.extend((1..=t).map(|i| format!("loss_task_{i}")));
    header.push("cumulative".to_string());
    w.write_record(&header).map_err(fail)?;
    for p in points {
        let mut rec = vec![p.alpha.to_string(), p.beta.to_string()];
        rec.extend(p.task_losses.iter().map(|v| v.to_string()));
        rec.push(p.cumulative.to_string());
        w.write_record(&rec).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
