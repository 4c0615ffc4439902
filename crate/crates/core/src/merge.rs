//! Merging the projected and unconstrained checkpoints of a task.
//!
//! Along the path `theta(lambda) = (1 - lambda) theta_gp + lambda theta_hat`
//! with `d = theta_hat - theta_gp`, the Laplace surrogate of the cumulative
//! loss is (up to a constant)
//!
//! ```text
//! L(lambda) = 1/2 (lambda - 1)^2 d'F d + 1/2 lambda^2 d'Λ d
//! ```
//!
//! where `F` is the new task's Fisher at `theta_hat` and `Λ` the precision
//! accumulated over earlier tasks. It is convex with minimizer
//! `lambda* = d'F d / d'(F + Λ) d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::{FisherDiag, PrecisionDiag};
use crate::params::ParamVector;

/// Denominators below this (relative to `|d|^2`) make the merge degenerate.
pub const DEGENERATE_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct MergeInputs<'a> {
    pub theta_gp: &'a ParamVector,
    pub theta_hat: &'a ParamVector,
    /// Fisher of the current task evaluated at `theta_hat`.
    pub fisher_hat: &'a FisherDiag,
    /// Precision accumulated through the previous task.
    pub precision_prev: &'a PrecisionDiag,
}

impl MergeInputs<'_> {
    fn check(&self) -> Result<ParamVector> {
        self.theta_gp.check_layout(self.theta_hat, "merge inputs")?;
        self.theta_gp.check_layout(self.fisher_hat.values(), "merge fisher")?;
        self.theta_gp.check_layout(self.precision_prev.values(), "merge precision")?;
        let delta = self.theta_hat.sub(self.theta_gp)?;
        if !delta.is_finite() {
            return Err(Error::numerical("checkpoint difference is not finite"));
        }
        Ok(delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeDiagnostics {
    /// `d' F d`
    pub numerator: f64,
    /// `d' (F + Λ) d`
    pub denominator: f64,
    pub degenerate: bool,
}

impl MergeDiagnostics {
    /// `d' Λ d`
    pub fn precision_term(&self) -> f64 {
        self.denominator - self.numerator
    }

    /// Surrogate objective (without the constant `L_t(theta_hat)`).
    pub fn surrogate(&self, lambda: f64) -> f64 {
        0.5 * (lambda - 1.0).powi(2) * self.numerator + 0.5 * lambda * lambda * self.precision_term()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeResult {
    /// Interpolation weight on `theta_hat`; `None` for parameter-wise strategies.
    pub lambda: Option<f64>,
    pub merged: ParamVector,
    pub diagnostics: MergeDiagnostics,
}

/// Closed-form merging coefficient.
///
/// Returns `lambda = 0` with the degeneracy flag when the curvature along the
/// path vanishes.
pub fn adaptive_lambda(inputs: &MergeInputs<'_>) -> Result<(f64, MergeDiagnostics)> {
    let delta = inputs.check()?;
    let numerator = delta.diag_quadratic(inputs.fisher_hat.values().values());
    let prec = delta.diag_quadratic(inputs.precision_prev.values().values());
    let denominator = numerator + prec;
    if !numerator.is_finite() || !denominator.is_finite() {
        return Err(Error::numerical("merge quadratic forms are not finite"));
    }
    let scale = delta.dot(&delta);
    if denominator < DEGENERATE_RATIO * scale || denominator <= 0.0 {
        log::warn!("degenerate merge: denominator {denominator:e}, |d|^2 {scale:e}");
        return Ok((
            0.0,
            MergeDiagnostics {
                numerator,
                denominator,
                degenerate: true,
            },
        ));
    }
    let lambda = (numerator / denominator).clamp(0.0, 1.0);
    Ok((
        lambda,
        MergeDiagnostics {
            numerator,
            denominator,
            degenerate: false,
        },
    ))
}

/// `(1 - lambda) theta_gp + lambda theta_hat`, elementwise.
pub fn merge(theta_gp: &ParamVector, theta_hat: &ParamVector, lambda: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::rejected(format!("merge coefficient {lambda} outside [0, 1]")));
    }
    theta_gp.check_layout(theta_hat, "merge")?;
    let values = theta_gp
        .values()
        .iter()
        .zip(theta_hat.values())
        .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
        .collect();
    ParamVector::from_values(theta_gp.layout().clone(), values)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    #[default]
    Adaptive,
    /// Weight `1/t` on the new checkpoint (running mean of checkpoints).
    OneOverT,
    Constant(f64),
    /// Per-parameter precision-weighted average with mixing `alpha`.
    FisherWeightedParamwise(f64),
}

impl MergeStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MergeStrategy::Constant(c) if !(0.0..=1.0).contains(&c) => {
                Err(Error::rejected(format!("constant merge coefficient {c} outside [0, 1]")))
            }
            MergeStrategy::FisherWeightedParamwise(a) if !(0.0..=1.0).contains(&a) => {
                Err(Error::rejected(format!("paramwise mixing {a} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Merges task `t`'s checkpoints under `strategy`.
///
/// Diagnostics always carry the adaptive quadratic forms so strategies can be
/// compared on the same surrogate.
pub fn strategy_merge(strategy: MergeStrategy, t: usize, inputs: &MergeInputs<'_>) -> Result<MergeResult> {
    strategy.validate()?;
    let (adaptive, diagnostics) = adaptive_lambda(inputs)?;
    let lambda = match strategy {
        MergeStrategy::Adaptive => adaptive,
        MergeStrategy::OneOverT => {
            if t < 2 {
                return Err(Error::rejected("1/t merging starts at task 2"));
            }
            1.0 / t as f64
        }
        MergeStrategy::Constant(c) => c,
        MergeStrategy::FisherWeightedParamwise(alpha) => {
            let merged = paramwise_merge(inputs, alpha)?;
            return Ok(MergeResult {
                lambda: None,
                merged,
                diagnostics,
            });
        }
    };
    Ok(MergeResult {
        lambda: Some(lambda),
        merged: merge(inputs.theta_gp, inputs.theta_hat, lambda)?,
        diagnostics,
    })
}

/// `((1 - a) Λ_j gp_j + a F_j hat_j) / ((1 - a) Λ_j + a F_j)`, midpoint where
/// the weights vanish.
pub fn paramwise_merge(inputs: &MergeInputs<'_>, alpha: f64) -> Result<ParamVector> {
    inputs.check()?;
    let lam = inputs.precision_prev.values().values();
    let fis = inputs.fisher_hat.values().values();
    let values = inputs
        .theta_gp
        .values()
        .iter()
        .zip(inputs.theta_hat.values())
        .zip(lam.iter().zip(fis))
        .map(|((&gp, &hat), (&l, &f))| {
            let wg = (1.0 - alpha) * l;
            let wh = alpha * f;
            let den = wg + wh;
            if den < DEGENERATE_RATIO {
                0.5 * (gp + hat)
            } else {
                (wg * gp + wh * hat) / den
            }
        })
        .collect();
    ParamVector::from_values(inputs.theta_gp.layout().clone(), values)
}

/// Evenly spaced coefficients in `[0, 1]`, always including both ends.
pub fn lambda_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(Error::rejected(format!("grid step {step} outside (0, 0.5]")));
    }
    let n = (1.0 / step).round();
    if ((n * step) - 1.0).abs() < 1e-9 {
        let n = n as usize;
        return Ok((0..=n).map(|k| k as f64 / n as f64).collect());
    }
    let mut grid: Vec<f64> = (0..).map(|k| k as f64 * step).take_while(|&l| l < 1.0).collect();
    grid.push(1.0);
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub lambda_min: f64,
    pub curve: Vec<(f64, f64)>,
}

/// Grid arg-min of `loss` over `[0, 1]`; ties go to the smaller coefficient.
pub fn sweep_oracle(mut loss: impl FnMut(f64) -> Result<f64>, step: f64) -> Result<Sweep> {
    let mut curve = Vec::new();
    for lambda in lambda_grid(step)? {
        let v = loss(lambda)?;
        if !v.is_finite() {
            return Err(Error::numerical(format!("loss at lambda = {lambda} is not finite")));
        }
        curve.push((lambda, v));
    }
    let mut best = 0;
    for (i, &(_, v)) in curve.iter().enumerate() {
        if v < curve[best].1 {
            best = i;
        }
    }
    Ok(Sweep {
        lambda_min: curve[best].0,
        curve,
    })
}
