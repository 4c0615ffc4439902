//! Exact quadratic continual-learning environment.
//!
//! Each task loss is `L_i(theta) = 1/2 (theta - mu_i)' H_i (theta - mu_i) + c_i`
//! with diagonal `H_i >= 0`. Second-order expansions are exact here, so the
//! merge coefficient, the endpoint derivatives and the convexity of the path
//! objective can all be checked without sampling noise.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::merge::DEGENERATE_RATIO;
use crate::seed::{self, tag};

/// Slack for the endpoint derivative signs.
pub const SIGN_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTask {
    pub mu: Vec<f64>,
    pub h: Vec<f64>,
    pub c: f64,
}

impl QuadraticTask {
    pub fn new(mu: Vec<f64>, h: Vec<f64>, c: f64) -> Result<Self> {
        if mu.len() != h.len() {
            return Err(Error::rejected("minimizer and curvature dimensions differ"));
        }
        if h.iter().any(|&v| !(v >= 0.0)) || !(c >= 0.0) {
            return Err(Error::rejected("curvature and offset must be nonnegative"));
        }
        Ok(QuadraticTask { mu, h, c })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        0.5 * theta
            .iter()
            .zip(&self.mu)
            .zip(&self.h)
            .map(|((t, m), h)| h * (t - m) * (t - m))
            .sum::<f64>()
            + self.c
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.mu)
            .zip(&self.h)
            .map(|((t, m), h)| h * (t - m))
            .collect()
    }
}

fn quad(d: &[f64], diag: &[f64]) -> f64 {
    d.iter().zip(diag).map(|(x, w)| w * x * x).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lerp(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect()
}

fn check_dims(n: usize, parts: &[&[f64]]) -> Result<()> {
    if parts.iter().all(|p| p.len() == n) {
        Ok(())
    } else {
        Err(Error::rejected("dimension mismatch"))
    }
}

/// `L_t(theta_hat + (lambda - 1) d) + 1/2 lambda^2 d' Λ d`, `d = theta_hat - theta_gp`.
pub fn path_objective(
    task: &QuadraticTask,
    precision: &[f64],
    theta_gp: &[f64],
    theta_hat: &[f64],
    lambda: f64,
) -> Result<f64> {
    check_dims(task.dim(), &[precision, theta_gp, theta_hat])?;
    let d = sub(theta_hat, theta_gp);
    let point: Vec<f64> = theta_hat.iter().zip(&d).map(|(h, d)| h + (lambda - 1.0) * d).collect();
    Ok(task.loss(&point) + 0.5 * lambda * lambda * quad(&d, precision))
}

/// Path-objective slopes at `lambda = 0` and `lambda = 1` for a `theta_hat`
/// that minimizes the task: `(-d'H d, d'Λ d)`.
pub fn endpoint_derivative_signs(
    task: &QuadraticTask,
    precision: &[f64],
    theta_gp: &[f64],
    theta_hat: &[f64],
) -> Result<(f64, f64)> {
    check_dims(task.dim(), &[precision, theta_gp, theta_hat])?;
    let d = sub(theta_hat, theta_gp);
    if d.iter().all(|&v| v == 0.0) {
        return Err(Error::rejected("checkpoints coincide"));
    }
    Ok((-quad(&d, &task.h), quad(&d, precision)))
}

/// Second derivative `d'(H + Λ) d` of the path objective.
pub fn convexity_check(task: &QuadraticTask, precision: &[f64], theta_gp: &[f64], theta_hat: &[f64]) -> Result<f64> {
    check_dims(task.dim(), &[precision, theta_gp, theta_hat])?;
    let d = sub(theta_hat, theta_gp);
    let v = quad(&d, &task.h) + quad(&d, precision);
    debug_assert!(v >= 0.0);
    Ok(v)
}

/// Closed-form minimizer of the path objective, `0` when degenerate.
pub fn closed_form_lambda(h: &[f64], precision: &[f64], d: &[f64]) -> f64 {
    let num = quad(d, h);
    let den = num + quad(d, precision);
    if den <= 0.0 || den < DEGENERATE_RATIO * dot(d, d) {
        0.0
    } else {
        (num / den).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaReport {
    pub lambda_star: f64,
    pub loss_at_0: f64,
    pub loss_at_star: f64,
    pub loss_at_1: f64,
    /// Slope of the true cumulative loss at `lambda = 0` (must be <= 0).
    pub slope_at_0: f64,
    /// Slope at `lambda = 1` (expected >= 0).
    pub slope_at_1: f64,
    pub second_derivative: f64,
    /// Grid arg-min of the cumulative loss at step `1e-3`.
    pub grid_lambda: f64,
    pub lemma_holds: bool,
    pub slope_0_ok: bool,
    /// A violation is logged, not failed: the premise is heuristic.
    pub slope_1_ok: bool,
    pub convex: bool,
    pub grid_agrees: bool,
}

impl LemmaReport {
    /// Hard assertions of the lab.
    pub fn passes(&self) -> bool {
        self.lemma_holds && self.slope_0_ok && self.convex && self.grid_agrees
    }
}

/// Sum of the losses of `tasks` at `theta`.
pub fn cumulative_loss(tasks: &[QuadraticTask], theta: &[f64]) -> f64 {
    tasks.iter().map(|t| t.loss(theta)).sum()
}

/// Exact minimizer of `sum L_i` per coordinate; coordinates without curvature get `fallback`.
pub fn cumulative_minimizer(tasks: &[QuadraticTask], fallback: &[f64]) -> Vec<f64> {
    (0..fallback.len())
        .map(|j| {
            let hs: f64 = tasks.iter().map(|t| t.h[j]).sum();
            if hs > 0.0 {
                tasks.iter().map(|t| t.h[j] * t.mu[j]).sum::<f64>() / hs
            } else {
                fallback[j]
            }
        })
        .collect()
}

/// Result of exact gradient flow on `task` from `start`.
pub fn gradient_flow_limit(task: &QuadraticTask, start: &[f64]) -> Vec<f64> {
    start
        .iter()
        .zip(&task.mu)
        .zip(&task.h)
        .map(|((s, m), &h)| if h > 0.0 { *m } else { *s })
        .collect()
}

/// Checks the merge lemma on tasks `1..=t` (the last one is the new task).
pub fn lemma1_check(tasks: &[QuadraticTask], theta_prev_star: &[f64], theta_hat: &[f64]) -> Result<LemmaReport> {
    let (new, prev) = tasks
        .split_last()
        .ok_or_else(|| Error::rejected("lemma check needs at least one task"))?;
    let n = new.dim();
    check_dims(n, &[theta_prev_star, theta_hat])?;
    if prev.iter().any(|t| t.dim() != n) {
        return Err(Error::rejected("tasks differ in dimension"));
    }

    let mut grad_prev = vec![0.0; n];
    let mut precision = vec![0.0; n];
    for t in prev {
        grad_prev.iter_mut().zip(t.grad(theta_prev_star)).for_each(|(a, g)| *a += g);
        precision.iter_mut().zip(&t.h).for_each(|(a, h)| *a += h);
    }
    let scale = 1.0 + precision.iter().fold(0.0f64, |m, v| m.max(*v)) * theta_prev_star.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if grad_prev.iter().any(|g| g.abs() > 1e-9 * scale) {
        return Err(Error::rejected("starting point does not minimize the previous cumulative loss"));
    }

    let d = sub(theta_hat, theta_prev_star);
    let lambda_star = closed_form_lambda(&new.h, &precision, &d);
    let at = |lambda: f64| cumulative_loss(tasks, &lerp(theta_prev_star, theta_hat, lambda));
    let (loss_at_0, loss_at_star, loss_at_1) = (at(0.0), at(lambda_star), at(1.0));

    let slope_at_0 = dot(&new.grad(theta_prev_star), &d);
    let mut grad_prev_hat = vec![0.0; n];
    for t in prev {
        grad_prev_hat.iter_mut().zip(t.grad(theta_hat)).for_each(|(a, g)| *a += g);
    }
    let slope_at_1 = dot(&grad_prev_hat, &d);
    let second_derivative = quad(&d, &new.h) + quad(&d, &precision);

    let grid_lambda = crate::merge::sweep_oracle(|l| Ok(at(l)), 1e-3)?.lambda_min;
    let slope_1_ok = slope_at_1 >= -SIGN_SLACK;
    if !slope_1_ok {
        log::warn!("slope at lambda = 1 is {slope_at_1:e}");
    }
    Ok(LemmaReport {
        lambda_star,
        loss_at_0,
        loss_at_star,
        loss_at_1,
        slope_at_0,
        slope_at_1,
        second_derivative,
        grid_lambda,
        lemma_holds: loss_at_star <= loss_at_0.min(loss_at_1),
        slope_0_ok: slope_at_0 <= SIGN_SLACK,
        slope_1_ok,
        convex: second_derivative >= 0.0,
        // flat curves make every grid point optimal
        grid_agrees: (grid_lambda - lambda_star).abs() <= 1e-3 || at(grid_lambda) >= loss_at_star,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubstitutionResidual {
    /// `d'Λ d`
    pub numerator: f64,
    /// `d'Λ d / (|d|^2 mean(Λ) + eps)`
    pub residual: f64,
}

/// How far the projected checkpoint moved along the precision's support,
/// `d = theta_gp - theta_prev_star`.
pub fn gp_substitution_check(precision: &[f64], theta_prev_star: &[f64], theta_gp: &[f64]) -> Result<SubstitutionResidual> {
    check_dims(precision.len(), &[theta_prev_star, theta_gp])?;
    let d = sub(theta_gp, theta_prev_star);
    let numerator = quad(&d, precision);
    let mean = precision.iter().sum::<f64>() / precision.len().max(1) as f64;
    let residual = numerator / (dot(&d, &d) * mean + 1e-12);
    Ok(SubstitutionResidual { numerator, residual })
}

/// One random lab instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabInstance {
    pub tasks: Vec<QuadraticTask>,
    pub theta_prev_star: Vec<f64>,
    pub theta_hat: Vec<f64>,
}

/// Draws an instance with `dim <= max_dim` and `2 <= t <= max_tasks`.
/// About a fifth of curvature entries are zero so kernels are exercised.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, max_dim: usize, max_tasks: usize) -> LabInstance {
    let dim = rng.random_range(1..=max_dim);
    let t = rng.random_range(2..=max_tasks.max(2));
    let tasks: Vec<QuadraticTask> = (0..t)
        .map(|_| {
            let mu = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let h = (0..dim)
                .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.05..4.0) })
                .collect();
            QuadraticTask::new(mu, h, rng.random_range(0.0..1.0)).expect("valid draw")
        })
        .collect();
    let fallback: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let theta_prev_star = cumulative_minimizer(&tasks[..t - 1], &fallback);
    let theta_hat = gradient_flow_limit(&tasks[t - 1], &theta_prev_star);
    LabInstance {
        tasks,
        theta_prev_star,
        theta_hat,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabRow {
    pub instance: usize,
    pub dim: usize,
    pub tasks: usize,
    #[serde(flatten)]
    pub report: LemmaReport,
}

/// Runs `instances` seeded lab instances (dimension up to 8, up to 4 tasks).
pub fn run_lab(seed: u64, instances: usize) -> Result<Vec<LabRow>> {
    (0..instances)
        .map(|i| {
            let mut rng = seed::rng(seed, tag::LAB, i as u64);
            let inst = random_instance(&mut rng, 8, 4);
            let report = lemma1_check(&inst.tasks, &inst.theta_prev_star, &inst.theta_hat)?;
            Ok(LabRow {
                instance: i,
                dim: inst.theta_hat.len(),
                tasks: inst.tasks.len(),
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task(mu: &[f64], h: &[f64], c: f64) -> QuadraticTask {
        QuadraticTask::new(mu.to_vec(), h.to_vec(), c).unwrap()
    }

    #[test]
    fn path_objective_endpoints() {
        let t = task(&[1.0, -1.0], &[2.0, 1.0], 0.25);
        let gp = [0.0, 0.0];
        let hat = [0.5, 0.5];
        let v1 = path_objective(&t, &[0.0, 0.0], &gp, &hat, 1.0).unwrap();
        assert_eq!(v1, t.loss(&hat));
        // minimized at lambda = 1 with value c when theta_hat = mu and Λ = 0
        let at_mu = |l| path_objective(&t, &[0.0, 0.0], &gp, &t.mu, l).unwrap();
        assert_eq!(at_mu(1.0), 0.25);
        for l in [0.0, 0.3, 0.9] {
            assert!(at_mu(l) > 0.25);
        }
    }

    #[test]
    fn path_objective_matches_hand_expansion() {
        // d = (1, 1); H = (2, 1); Λ = (1, 3); theta_hat = mu
        // L(λ) = c + 1/2 (λ-1)^2 (2 + 1) + 1/2 λ^2 (1 + 3) = 0.5 + 1.5 (λ-1)^2 + 2 λ^2
        let t = task(&[1.0, 2.0], &[2.0, 1.0], 0.5);
        let gp = [0.0, 1.0];
        for l in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let v = path_objective(&t, &[1.0, 3.0], &gp, &t.mu, l).unwrap();
            let expect = 0.5 + 1.5 * (l - 1.0) * (l - 1.0) + 2.0 * l * l;
            assert!((v - expect).abs() < 1e-14, "{l}: {v} vs {expect}");
        }
    }

    #[test]
    fn endpoint_slopes_fixture_and_finite_differences() {
        let t = task(&[1.0, 2.0], &[2.0, 1.0], 0.0);
        let gp = [0.0, 1.0];
        let prec = [1.0, 3.0];
        let (s0, s1) = endpoint_derivative_signs(&t, &prec, &gp, &t.mu).unwrap();
        assert_eq!((s0, s1), (-3.0, 4.0));
        let f = |l: f64| path_objective(&t, &prec, &gp, &t.mu, l).unwrap();
        let h = 1e-6;
        assert!(((f(h) - f(-h)) / (2.0 * h) - s0).abs() < 1e-6);
        assert!(((f(1.0 + h) - f(1.0 - h)) / (2.0 * h) - s1).abs() < 1e-6);
        assert_eq!(convexity_check(&t, &prec, &gp, &t.mu).unwrap(), 7.0);

        let flat = task(&[1.0, 2.0], &[0.0, 0.0], 0.0);
        assert_eq!(endpoint_derivative_signs(&flat, &prec, &gp, &t.mu).unwrap().0, 0.0);
        assert_eq!(endpoint_derivative_signs(&t, &[0.0, 0.0], &gp, &t.mu).unwrap().1, 0.0);
        assert_eq!(convexity_check(&flat, &[0.0, 0.0], &gp, &t.mu).unwrap(), 0.0);
        assert!(endpoint_derivative_signs(&t, &prec, &gp, &gp).is_err());
    }

    #[test]
    fn random_curvatures_are_convex_with_constant_second_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let inst = random_instance(&mut rng, 8, 2);
            let t = &inst.tasks[1];
            let prec: Vec<f64> = inst.tasks[0].h.clone();
            let gp = &inst.theta_prev_star;
            let hat: Vec<f64> = gp.iter().zip(&t.mu).map(|(a, m)| a + 0.5 * (m - a) + 0.1).collect();
            let v = convexity_check(t, &prec, gp, &hat).unwrap();
            assert!(v >= 0.0);
            let f = |l: f64| path_objective(t, &prec, gp, &hat, l).unwrap();
            for l in [0.1, 0.5, 0.9] {
                let h = 1e-3;
                let second = (f(l + h) - 2.0 * f(l) + f(l - h)) / (h * h);
                assert!((second - v).abs() <= 1e-5 * (1.0 + v), "{second} vs {v}");
            }
        }
    }

    #[test]
    fn closed_form_equals_parabola_vertex() {
        // independent route: fit a parabola through three evaluations
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let inst = random_instance(&mut rng, 8, 3);
            let (new, prev) = inst.tasks.split_last().unwrap();
            let prec: Vec<f64> = (0..new.dim()).map(|j| prev.iter().map(|t| t.h[j]).sum()).collect();
            let f = |l: f64| path_objective(new, &prec, &inst.theta_prev_star, &inst.theta_hat, l).unwrap();
            let (f0, f5, f1) = (f(0.0), f(0.5), f(1.0));
            let a = 2.0 * f0 - 4.0 * f5 + 2.0 * f1;
            let b = -3.0 * f0 + 4.0 * f5 - f1;
            let d = sub(&inst.theta_hat, &inst.theta_prev_star);
            let lambda = closed_form_lambda(&new.h, &prec, &d);
            if a > 1e-9 {
                let vertex = (-b / (2.0 * a)).clamp(0.0, 1.0);
                assert!((lambda - vertex).abs() < 1e-10 * (1.0 + 1.0 / a), "{lambda} vs {vertex}");
            }
        }
    }

    #[test]
    fn symmetric_curvature_gives_midpoint() {
        let h = [0.7, 2.0, 0.1];
        let d = [1.0, -0.3, 4.0];
        assert_eq!(closed_form_lambda(&h, &h, &d), 0.5);
    }

    #[test]
    fn lemma_two_task_fixture() {
        let tasks = [task(&[0.0, 0.0], &[1.0, 1.0], 0.0), task(&[2.0, 0.0], &[1.0, 1.0], 0.0)];
        let prev = cumulative_minimizer(&tasks[..1], &[0.0, 0.0]);
        let hat = gradient_flow_limit(&tasks[1], &prev);
        let r = lemma1_check(&tasks, &prev, &hat).unwrap();
        assert_eq!(r.lambda_star, 0.5);
        assert_eq!(r.loss_at_star, 1.0);
        assert_eq!((r.loss_at_0, r.loss_at_1), (2.0, 2.0));
        assert!(r.passes());
    }

    #[test]
    fn lemma_flat_new_task_is_tight() {
        let tasks = [task(&[1.0, -1.0], &[1.0, 2.0], 0.0), task(&[5.0, 5.0], &[0.0, 0.0], 0.3)];
        let prev = cumulative_minimizer(&tasks[..1], &[0.0, 0.0]);
        let hat = gradient_flow_limit(&tasks[1], &prev);
        assert_eq!(hat, prev);
        let r = lemma1_check(&tasks, &prev, &hat).unwrap();
        assert_eq!(r.loss_at_star, r.loss_at_0);
        assert_eq!(r.loss_at_star, r.loss_at_1);
        assert!(r.passes());
    }

    #[test]
    fn lemma_rejects_non_optimal_start() {
        let tasks = [task(&[0.0], &[1.0], 0.0), task(&[2.0], &[1.0], 0.0)];
        assert!(lemma1_check(&tasks, &[0.5], &[2.0]).is_err());
    }

    #[test]
    fn random_lemma_instances_hold() {
        let rows = run_lab(2024, 50).unwrap();
        for r in &rows {
            assert!(r.dim <= 8 && r.tasks <= 4);
            assert!(r.report.passes(), "instance {}: {:?}", r.instance, r.report);
        }
        assert_eq!(rows, run_lab(2024, 50).unwrap());
    }

    #[test]
    fn substitution_residual_cases() {
        let r = gp_substitution_check(&[1.0, 0.0], &[0.3, 0.3], &[0.3, 0.3]).unwrap();
        assert_eq!(r.residual, 0.0);
        let r = gp_substitution_check(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 5.0]).unwrap();
        assert_eq!(r.residual, 0.0);
        let r = gp_substitution_check(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(r.numerator, 1.0);
        assert!(r.residual > 1.0);
    }
}
