//! Minibatch SGD run to an approximate local minimum.
//!
//! The learning rate is divided by `factor` after `patience` epochs without a
//! new best training loss; training stops once it falls below `lr_min` or
//! `max_epochs` is reached.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Batch, GradientProjector, NetworkSpec};
use crate::params::ParamVector;
use crate::seed::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub lr: f64,
    pub lr_min: f64,
    pub patience: usize,
    pub factor: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            lr: 0.01,
            lr_min: 1e-5,
            patience: 6,
            factor: 2.0,
            max_epochs: 200,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    /// A zero epoch budget is accepted and means "do not train".
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr > self.lr_min) {
            return Err(Error::rejected(format!(
                "need lr > lr_min > 0, got lr={} lr_min={}",
                self.lr, self.lr_min
            )));
        }
        if self.patience == 0 {
            return Err(Error::rejected("patience must be at least 1"));
        }
        if !(self.factor > 1.0) {
            return Err(Error::rejected(format!("decay factor {} must exceed 1", self.factor)));
        }
        if self.batch_size == 0 {
            return Err(Error::rejected("batch size must be at least 1"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LrBelowMinimum,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    /// Full-data training loss after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub epoch_lrs: Vec<f64>,
    /// Norm of the full-data, unprojected gradient at the returned parameters.
    pub final_grad_norm: Option<f64>,
    pub stop: StopReason,
}

/// Trains on one task until the schedule's stopping rule fires.
pub fn train_to_minimum(
    spec: &NetworkSpec,
    params: &ParamVector,
    data: &Batch<'_>,
    schedule: &TrainSchedule,
    projector: Option<&dyn GradientProjector>,
) -> Result<(ParamVector, Trace)> {
    train_observed(spec, params, std::slice::from_ref(data), schedule, projector, &mut |_, _| Ok(()))
}

/// Mean of per-task mean losses and gradients.
pub fn joint_loss_and_grad(spec: &NetworkSpec, params: &ParamVector, parts: &[Batch<'_>]) -> Result<(f64, ParamVector)> {
    let mut total = 0.0;
    let mut grad = params.zeros_like();
    let w = 1.0 / parts.len() as f64;
    for b in parts {
        let (l, g) = nn::loss_and_grad(spec, params, b)?;
        total += w * l;
        grad.axpy(w, &g)?;
    }
    Ok((total, grad))
}

/// Trains on several tasks at once (or one), calling `observer(epoch, params)` after every epoch.
///
/// Each step averages one minibatch from every task; tasks with fewer
/// minibatches wrap around within the epoch.
pub fn train_observed(
    spec: &NetworkSpec,
    params: &ParamVector,
    parts: &[Batch<'_>],
    schedule: &TrainSchedule,
    projector: Option<&dyn GradientProjector>,
    observer: &mut dyn FnMut(usize, &ParamVector) -> Result<()>,
) -> Result<(ParamVector, Trace)> {
    schedule.validate()?;
    if parts.is_empty() || parts.iter().any(|b| b.is_empty()) {
        return Err(Error::rejected("training data is empty"));
    }
    let mut params = params.clone();
    let mut trace = Trace {
        epoch_losses: Vec::new(),
        epoch_lrs: Vec::new(),
        final_grad_norm: None,
        stop: StopReason::MaxEpochs,
    };
    if schedule.max_epochs == 0 {
        return Ok((params, trace));
    }

    let bs = schedule.batch_size;
    let steps = parts.iter().map(|b| b.len().div_ceil(bs)).max().unwrap_or(0);
    let mut lr = schedule.lr;
    let mut best = f64::INFINITY;
    let mut stale = 0;

    for epoch in 0..schedule.max_epochs {
        let orders: Vec<Vec<usize>> = parts
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let mut order: Vec<usize> = (0..b.len()).collect();
                let sub = seed::derive(schedule.seed, tag::SHUFFLE, k as u64);
                order.shuffle(&mut seed::rng(sub, tag::SHUFFLE, epoch as u64));
                order
            })
            .collect();

        for step in 0..steps {
            let mut grad = params.zeros_like();
            let w = 1.0 / parts.len() as f64;
            for (b, order) in parts.iter().zip(&orders) {
                let chunks = b.len().div_ceil(bs);
                let c = step % chunks;
                let rows = &order[c * bs..((c + 1) * bs).min(b.len())];
                let x = nn::gather_rows(&b.inputs, rows);
                let y: Vec<usize> = rows.iter().map(|&r| b.labels[r]).collect();
                let (_, g) = nn::loss_and_grad(spec, &params, &Batch::new(x.view(), &y, b.task))
                    .map_err(|e| match e {
                        Error::Numerical(m) => Error::numerical(format!("epoch {epoch}: {m}")),
                        other => other,
                    })?;
                grad.axpy(w, &g)?;
            }
            nn::sgd_step(&mut params, &grad, lr, projector)?;
        }

        let loss = joint_loss_and_grad(spec, &params, parts)
            .map(|(l, _)| l)
            .map_err(|e| Error::numerical(format!("training diverged at epoch {epoch}: {e}")))?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("training diverged at epoch {epoch}")));
        }
        trace.epoch_losses.push(loss);
        trace.epoch_lrs.push(lr);
        observer(epoch, &params)?;

        if loss < best {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= schedule.patience {
                lr /= schedule.factor;
                stale = 0;
                if lr < schedule.lr_min {
                    trace.stop = StopReason::LrBelowMinimum;
                    break;
                }
            }
        }
    }
    let (_, g) = joint_loss_and_grad(spec, &params, parts)?;
    trace.final_grad_norm = Some(g.norm());
    log::debug!(
        "trained {} epochs, final loss {:?}, grad norm {:?}",
        trace.epoch_losses.len(),
        trace.epoch_losses.last(),
        trace.final_grad_norm
    );
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::params::SegmentKind;
    use crate::taskgen::{synthetic_gaussians, GaussianStreamSpec};
    use ndarray::ArrayView1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn separable() -> crate::taskgen::TaskStream {
        synthetic_gaussians(
            21,
            &GaussianStreamSpec {
                tasks: 2,
                dim: 4,
                classes_per_task: 2,
                n_train: 200,
                n_test: 50,
                separation: 6.0,
            },
        )
        .unwrap()
    }

    fn schedule() -> TrainSchedule {
        TrainSchedule {
            lr: 0.1,
            lr_min: 1e-3,
            patience: 3,
            factor: 2.0,
            max_epochs: 40,
            batch_size: 16,
            seed: 5,
        }
    }

    /// Plain logistic regression by full-batch gradient descent.
    fn logistic_oracle_accuracy(x: ndarray::ArrayView2<'_, f64>, y: &[usize]) -> f64 {
        let d = x.ncols();
        let mut w = vec![0.0; d + 1];
        for _ in 0..500 {
            let mut g = vec![0.0; d + 1];
            for (row, &label) in x.rows().into_iter().zip(y) {
                let z = w[d] + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let e = p - label as f64;
                for j in 0..d {
                    g[j] += e * row[j];
                }
                g[d] += e;
            }
            for j in 0..=d {
                w[j] -= 0.1 * g[j] / y.len() as f64;
            }
        }
        let correct = x
            .rows()
            .into_iter()
            .zip(y)
            .filter(|(row, &label)| {
                let z = w[d] + ArrayView1::from(&w[..d]).dot(row);
                usize::from(z > 0.0) == label
            })
            .count();
        correct as f64 / y.len() as f64
    }

    #[test]
    fn separable_task_is_learned() {
        let stream = separable();
        let task = &stream.tasks()[0];
        let oracle = logistic_oracle_accuracy(task.train.inputs(), task.train.labels());
        assert!(oracle >= 0.99, "oracle accuracy {oracle}");

        let spec = NetworkSpec::mlp(4, &[8], Activation::Relu, true, vec![2, 2]).unwrap();
        let p0 = spec.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let (p, trace) = train_to_minimum(&spec, &p0, &task.train.batch(1), &schedule(), None).unwrap();
        let acc = nn::accuracy(&spec, &p, &task.train.batch(1)).unwrap();
        assert!(acc >= 0.99, "network accuracy {acc}");
        assert!(trace.final_grad_norm.unwrap().is_finite());
        assert_eq!(trace.epoch_losses.len(), trace.epoch_lrs.len());
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let stream = separable();
        let spec = NetworkSpec::mlp(4, &[8], Activation::Relu, true, vec![2, 2]).unwrap();
        let p0 = spec.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let s = TrainSchedule {
            max_epochs: 0,
            ..schedule()
        };
        let (p, trace) = train_to_minimum(&spec, &p0, &stream.tasks()[0].train.batch(1), &s, None).unwrap();
        assert_eq!(p, p0);
        assert!(trace.epoch_losses.is_empty());
        assert!(trace.final_grad_norm.is_none());
    }

    #[test]
    fn same_seed_reproduces_bitwise_and_other_heads_stay_put() {
        let stream = separable();
        let spec = NetworkSpec::mlp(4, &[8], Activation::Tanh, true, vec![2, 2]).unwrap();
        let p0 = spec.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let data = stream.tasks()[1].train.batch(2);
        let (a, ta) = train_to_minimum(&spec, &p0, &data, &schedule(), None).unwrap();
        let (b, tb) = train_to_minimum(&spec, &p0, &data, &schedule(), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        for seg in spec.layout().segments() {
            if seg.kind.head_task() == Some(1) {
                assert_eq!(a.segment(seg), p0.segment(seg));
            }
        }
        assert!(spec.layout().find(SegmentKind::HeadWeight { task: 2 }).is_some());
    }

    #[test]
    fn lr_decay_stops_training() {
        // zero inputs with balanced labels: the loss sits at ln 2 from the start
        let x = ndarray::Array2::<f64>::zeros((8, 4));
        let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let spec = NetworkSpec::mlp(4, &[], Activation::Identity, true, vec![2]).unwrap();
        let p0 = spec.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let s = TrainSchedule {
            lr: 2.0,
            lr_min: 0.5,
            patience: 1,
            max_epochs: 10_000,
            batch_size: 8,
            ..schedule()
        };
        let (_, trace) = train_to_minimum(&spec, &p0, &Batch::new(x.view(), &y, 1), &s, None).unwrap();
        assert_eq!(trace.stop, StopReason::LrBelowMinimum);
        assert_eq!(trace.epoch_lrs, vec![2.0, 2.0, 1.0, 0.5]);
    }

    #[test]
    fn divergence_is_a_numerical_fault() {
        let stream = separable();
        let spec = NetworkSpec::mlp(4, &[16], Activation::Identity, true, vec![2, 2]).unwrap();
        let p0 = spec.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let s = TrainSchedule {
            lr: 1e200,
            lr_min: 1.0,
            ..schedule()
        };
        let err = train_to_minimum(&spec, &p0, &stream.tasks()[0].train.batch(1), &s, None).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("epoch")), "{err}");
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let bad = [
            TrainSchedule { lr: 1e-6, ..schedule() },
            TrainSchedule { patience: 0, ..schedule() },
            TrainSchedule { factor: 1.0, ..schedule() },
            TrainSchedule { batch_size: 0, ..schedule() },
        ];
        for s in bad {
            assert!(s.validate().is_err());
        }
    }
}
