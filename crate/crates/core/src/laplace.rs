//! Diagonal Fisher information and recursive precision accumulation.

use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Batch, NetworkSpec};
use crate::params::ParamVector;
use crate::seed::{self, tag};
use crate::store;

/// Which labels the per-sample log-likelihood gradients use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherKind {
    /// Ground-truth labels.
    #[default]
    Empirical,
    /// Labels sampled from the model's own predictive distribution.
    True,
}

/// Diagonal of the Fisher information, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    values: ParamVector,
    samples: usize,
}

impl FisherDiag {
    pub fn from_values(values: ParamVector, samples: usize) -> Result<Self> {
        check_nonnegative(&values, "fisher")?;
        Ok(FisherDiag { values, samples })
    }

    pub fn values(&self) -> &ParamVector {
        &self.values
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_vector(path, store::FISHER_MAGIC, self.samples as u64, &self.values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, values) = store::read_vector(path, store::FISHER_MAGIC)?;
        Self::from_values(values, meta as usize)
    }
}

/// Accumulated diagonal precision after `tasks` accumulations.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionDiag {
    values: ParamVector,
    tasks: usize,
}

impl PrecisionDiag {
    /// Constant prior precision before any task.
    pub fn prior(layout: std::sync::Arc<crate::params::Layout>, scale: f64) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::rejected(format!("prior precision {scale} must be finite and nonnegative")));
        }
        let mut values = ParamVector::zeros(layout);
        values.values_mut().iter_mut().for_each(|v| *v = scale);
        Ok(PrecisionDiag { values, tasks: 0 })
    }

    pub fn from_values(values: ParamVector, tasks: usize) -> Result<Self> {
        check_nonnegative(&values, "precision")?;
        Ok(PrecisionDiag { values, tasks })
    }

    pub fn values(&self) -> &ParamVector {
        &self.values
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_vector(path, store::PRECISION_MAGIC, self.tasks as u64, &self.values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, values) = store::read_vector(path, store::PRECISION_MAGIC)?;
        Self::from_values(values, meta as usize)
    }
}

fn check_nonnegative(values: &ParamVector, what: &str) -> Result<()> {
    match values.values().iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
        Some(j) => Err(Error::rejected(format!(
            "{what} entry {j} is {} (must be finite and nonnegative)",
            values.values()[j]
        ))),
        None => Ok(()),
    }
}

/// Mean of squared per-sample gradients of the negative log-likelihood.
///
/// Uses every sample when `n_samples` equals the dataset size, otherwise a
/// seeded subset. Heads other than `task` get exactly zero.
pub fn fisher_diag(
    spec: &NetworkSpec,
    params: &ParamVector,
    data: &Batch<'_>,
    n_samples: usize,
    kind: FisherKind,
    seed: u64,
) -> Result<FisherDiag> {
    if n_samples == 0 || n_samples > data.len() {
        return Err(Error::rejected(format!(
            "cannot estimate Fisher from {n_samples} of {} samples",
            data.len()
        )));
    }
    let task = data.task;
    let mut rng = seed::rng(seed, tag::FISHER, task as u64);
    let indices: Vec<usize> = if n_samples == data.len() {
        (0..n_samples).collect()
    } else {
        let mut idx = index::sample(&mut rng, data.len(), n_samples).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut acc = params.zeros_like();
    let x = data.inputs;
    for &i in &indices {
        let row: Array2<f64> = x.row(i).to_owned().insert_axis(ndarray::Axis(0));
        let label = match kind {
            FisherKind::Empirical => data.labels[i],
            FisherKind::True => {
                let logits = nn::forward(spec, params, &Batch::new(row.view(), &[0], task))?.logits;
                let p = nn::softmax(&logits);
                sample_categorical(p.row(0).as_slice().expect("contiguous"), rng.random::<f64>())
            }
        };
        let labels = [label];
        let (_, g) = nn::loss_and_grad(spec, params, &Batch::new(row.view(), &labels, task))?;
        if !g.is_finite() {
            return Err(Error::numerical(format!("per-sample gradient of sample {i} is not finite")));
        }
        for (a, v) in acc.values_mut().iter_mut().zip(g.values()) {
            *a += v * v;
        }
    }
    acc.scale(1.0 / indices.len() as f64);
    FisherDiag::from_values(acc, indices.len())
}

fn sample_categorical(p: &[f64], u: f64) -> usize {
    let mut c = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        c += pi;
        if u < c {
            return i;
        }
    }
    p.len() - 1
}

/// `precision + fisher`, with the task counter advanced.
pub fn accumulate(state: &PrecisionDiag, fisher: &FisherDiag) -> Result<PrecisionDiag> {
    let mut values = state.values.clone();
    values.axpy(1.0, &fisher.values)?;
    Ok(PrecisionDiag {
        values,
        tasks: state.tasks + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::params::SegmentKind;
    use crate::taskgen::Dataset;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag(values: &[f64]) -> ParamVector {
        let layout = std::sync::Arc::new(crate::params::Layout::from_shapes([(
            "v".to_string(),
            SegmentKind::Weight { layer: 0 },
            values.len(),
            1,
        )]));
        ParamVector::from_values(layout, values.to_vec()).unwrap()
    }

    /// Two-class softmax with logits (0, theta * x) equals logistic regression on theta.
    fn logistic() -> (NetworkSpec, ParamVector) {
        let spec = NetworkSpec::mlp(1, &[], Activation::Identity, false, vec![2]).unwrap();
        (spec.clone(), ParamVector::zeros(spec.layout().clone()))
    }

    #[test]
    fn one_parameter_logistic_fixture() {
        // -log sigma(theta x) at theta = 0, x = 1, y = 1 has derivative -1/2
        let (spec, p) = logistic();
        let x = array![[1.0]];
        let f = fisher_diag(&spec, &p, &Batch::new(x.view(), &[1], 1), 1, FisherKind::Empirical, 0).unwrap();
        let w = spec.layout().find(SegmentKind::HeadWeight { task: 1 }).unwrap();
        // the softmax weight row for class 1 carries the logistic parameter
        assert_eq!(f.values().segment(w)[1], 0.25);
        assert_eq!(f.values().segment(w)[0], 0.25);
    }

    #[test]
    fn single_sample_is_squared_gradient() {
        let spec = NetworkSpec::mlp(3, &[4], Activation::Tanh, true, vec![2, 3]).unwrap();
        let p = spec.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let d = Dataset::new(array![[0.2, -1.0, 0.7], [1.0, 1.0, 1.0], [0.0, 0.1, 0.0]], vec![2, 0, 1], 3).unwrap();
        let f = fisher_diag(&spec, &p, &d.batch(2), 3, FisherKind::Empirical, 0).unwrap();
        let mut mean_sq = p.zeros_like();
        for i in 0..3 {
            let x = d.inputs().row(i).to_owned().insert_axis(ndarray::Axis(0));
            let (_, g) = nn::loss_and_grad(&spec, &p, &Batch::new(x.view(), &d.labels()[i..=i], 2)).unwrap();
            for (m, v) in mean_sq.values_mut().iter_mut().zip(g.values()) {
                *m += v * v / 3.0;
            }
        }
        for (a, b) in f.values().values().iter().zip(mean_sq.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        for seg in spec.layout().segments() {
            if seg.kind.head_task() == Some(1) {
                assert!(f.values().segment(seg).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn vanishing_gradients_give_zero_fisher() {
        // zero inputs: every per-sample weight gradient is exactly zero
        let spec = NetworkSpec::mlp(2, &[], Activation::Identity, false, vec![2]).unwrap();
        let p = ParamVector::zeros(spec.layout().clone());
        let d = Dataset::new(array![[0.0, 0.0], [0.0, 0.0]], vec![0, 1], 2).unwrap();
        let f = fisher_diag(&spec, &p, &d.batch(1), 2, FisherKind::Empirical, 0).unwrap();
        let w = spec.layout().find(SegmentKind::HeadWeight { task: 1 }).unwrap();
        assert!(f.values().segment(w).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn true_fisher_is_seeded_and_nonnegative() {
        let spec = NetworkSpec::mlp(3, &[4], Activation::Relu, true, vec![3]).unwrap();
        let p = spec.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        let d = Dataset::new(
            Array2::from_shape_fn((12, 3), |(i, j)| ((i * 3 + j) as f64).sin()),
            (0..12).map(|i| i % 3).collect(),
            3,
        )
        .unwrap();
        let a = fisher_diag(&spec, &p, &d.batch(1), 8, FisherKind::True, 3).unwrap();
        let b = fisher_diag(&spec, &p, &d.batch(1), 8, FisherKind::True, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples(), 8);
        assert!(a.values().values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn accumulation_examples() {
        let prior = PrecisionDiag::from_values(diag(&[0.0, 0.0]), 0).unwrap();
        let zero = FisherDiag::from_values(diag(&[0.0, 0.0]), 1).unwrap();
        let same = accumulate(&prior, &zero).unwrap();
        assert_eq!(same.values(), prior.values());
        assert_eq!(same.tasks(), 1);

        let a = PrecisionDiag::from_values(diag(&[1.0, 2.0]), 1).unwrap();
        let f = FisherDiag::from_values(diag(&[3.0, 4.0]), 1).unwrap();
        assert_eq!(accumulate(&a, &f).unwrap().values().values(), &[4.0, 6.0]);

        let other = FisherDiag::from_values(diag(&[1.0, 2.0, 3.0]), 1).unwrap();
        assert!(accumulate(&a, &other).is_err());
        assert!(FisherDiag::from_values(diag(&[-1.0]), 1).is_err());
    }

    proptest! {
        #[test]
        fn sequential_accumulation_matches_summed_fisher(
            fs in proptest::collection::vec(proptest::collection::vec(0.0f64..10.0, 4), 3)
        ) {
            let mut state = PrecisionDiag::prior(diag(&[0.0; 4]).layout().clone(), 0.5).unwrap();
            let mut sum = vec![0.5; 4];
            for f in &fs {
                let next = accumulate(&state, &FisherDiag::from_values(diag(f), 1).unwrap()).unwrap();
                for (a, b) in next.values().values().iter().zip(state.values().values()) {
                    prop_assert!(a >= b);
                }
                state = next;
                sum.iter_mut().zip(f).for_each(|(s, v)| *s += v);
            }
            for (a, b) in state.values().values().iter().zip(&sum) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert_eq!(state.tasks(), 3);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = FisherDiag::from_values(diag(&[0.5, 1.5]), 7).unwrap();
        f.save(&dir.path().join("f.bin")).unwrap();
        assert_eq!(FisherDiag::load(&dir.path().join("f.bin")).unwrap(), f);
        let p = PrecisionDiag::from_values(diag(&[0.5, 1.5]), 3).unwrap();
        p.save(&dir.path().join("p.bin")).unwrap();
        assert_eq!(PrecisionDiag::load(&dir.path().join("p.bin")).unwrap(), p);
        assert!(PrecisionDiag::load(&dir.path().join("f.bin")).is_err());
    }
}
