//! Gradient projection memory.
//!
//! After each task, the inputs seen by every shared linear layer are
//! summarized by an orthonormal basis of their dominant directions. Later
//! tasks update weight matrices only in the orthogonal complement of those
//! bases, so responses to earlier inputs stay (nearly) unchanged.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView2};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Batch, GradientProjector, NetworkSpec};
use crate::params::{ParamVector, SegmentKind};
use crate::taskgen::Dataset;

/// Relative size below which singular values count as zero.
pub const SVD_TOLERANCE: f64 = 1e-10;

/// Threshold schedule `eps(t) = base + (t - 1) * increment`, capped at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonSchedule {
    pub base: f64,
    pub increment: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            base: 0.97,
            increment: 3e-3,
        }
    }
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base < 1.0) {
            return Err(Error::rejected(format!("epsilon base {} must lie in (0, 1)", self.base)));
        }
        if !(self.increment >= 0.0) {
            return Err(Error::rejected(format!("epsilon increment {} must be nonnegative", self.increment)));
        }
        Ok(())
    }

    pub fn for_task(&self, t: usize) -> f64 {
        epsilon_for_task(self, t)
    }
}

pub fn epsilon_for_task(schedule: &EpsilonSchedule, t: usize) -> f64 {
    let t = t.max(1);
    let eps = schedule.base + (t - 1) as f64 * schedule.increment;
    if eps > 1.0 {
        if eps > 1.0 + 1e-12 {
            log::warn!("epsilon {eps} for task {t} exceeds 1; clamped");
        }
        1.0
    } else {
        eps
    }
}

/// Orthonormal basis of one shared layer's input space.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBasis {
    pub layer: usize,
    /// `input_dim x k`, orthonormal columns.
    pub vectors: Array2<f64>,
    /// Fraction of the latest representation energy captured after the last update.
    pub captured: f64,
    pub saturated: bool,
}

impl LayerBasis {
    pub fn input_dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn rank(&self) -> usize {
        self.vectors.ncols()
    }

    /// Largest entry of `|B^T B - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.vectors.t().dot(&self.vectors);
        g.indexed_iter()
            .map(|((i, j), &v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    layers: Vec<LayerBasis>,
}

impl SubspaceBasis {
    /// Empty bases for every shared layer of `spec`.
    pub fn empty(spec: &NetworkSpec) -> Self {
        SubspaceBasis {
            layers: spec
                .layers()
                .iter()
                .enumerate()
                .map(|(i, l)| LayerBasis {
                    layer: i,
                    vectors: Array2::zeros((l.input, 0)),
                    captured: 0.0,
                    saturated: false,
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerBasis] {
        &self.layers
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().map(LayerBasis::rank).collect()
    }

    /// Writes the raw matrices (row-major f64 little-endian, layer after layer)
    /// and a JSON sidecar describing their shapes.
    pub fn save(&self, bin: &Path, sidecar: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        let mut shapes = Vec::new();
        for l in &self.layers {
            for v in l.vectors.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            shapes.push(BasisShape {
                layer: l.layer,
                rows: l.vectors.nrows(),
                cols: l.vectors.ncols(),
                captured: l.captured,
                saturated: l.saturated,
            });
        }
        std::fs::write(bin, bytes).map_err(|e| Error::io(bin, e))?;
        let json = serde_json::to_string_pretty(&shapes).expect("basis shapes serialize");
        std::fs::write(sidecar, json).map_err(|e| Error::io(sidecar, e))
    }

    pub fn load(bin: &Path, sidecar: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
        let shapes: Vec<BasisShape> = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: sidecar.to_path_buf(),
            source,
        })?;
        let bytes = std::fs::read(bin).map_err(|e| Error::io(bin, e))?;
        let need: usize = shapes.iter().map(|s| s.rows * s.cols * 8).sum();
        if bytes.len() != need {
            return Err(Error::format("basis.data", format!("{} bytes, shapes need {need}", bytes.len())));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let layers = shapes
            .into_iter()
            .map(|s| LayerBasis {
                layer: s.layer,
                vectors: Array2::from_shape_fn((s.rows, s.cols), |_| values.next().expect("sized")),
                captured: s.captured,
                saturated: s.saturated,
            })
            .collect();
        Ok(SubspaceBasis { layers })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisShape {
    layer: usize,
    rows: usize,
    cols: usize,
    captured: f64,
    saturated: bool,
}

/// Inputs of every shared layer (`width x n_samples`) on a seeded sample subset,
/// columns in ascending sample order.
pub fn collect_representations(
    spec: &NetworkSpec,
    params: &ParamVector,
    dataset: &Dataset,
    task: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    if n_samples == 0 || n_samples > dataset.len() {
        return Err(Error::rejected(format!(
            "cannot sample {n_samples} representations from {} samples",
            dataset.len()
        )));
    }
    let mut rng = crate::seed::rng(seed, crate::seed::tag::REPS, task as u64);
    let mut idx = index::sample(&mut rng, dataset.len(), n_samples).into_vec();
    idx.sort_unstable();
    let (x, y) = dataset.subset(&idx);
    let fwd = nn::forward(spec, params, &Batch::new(x.view(), &y, task))?;
    Ok(fwd
        .activations
        .into_iter()
        .take(spec.layers().len())
        .map(|a| a.reversed_axes())
        .collect())
}

fn to_nalgebra(a: &ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Left singular vectors and singular values, sorted by decreasing singular value.
fn sorted_svd(a: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let svd = to_nalgebra(&a.view()).svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sigma = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u_sorted = Array2::from_shape_fn((u.nrows(), order.len()), |(r, c)| u[(r, order[c])]);
    (u_sorted, sigma)
}

/// Appends `candidates` to `basis` with modified Gram-Schmidt, dropping
/// columns that become numerically dependent.
fn append_orthonormal(basis: &Array2<f64>, candidates: &Array2<f64>) -> Array2<f64> {
    let mut cols: Vec<ndarray::Array1<f64>> = basis.columns().into_iter().map(|c| c.to_owned()).collect();
    let existing = cols.len();
    for cand in candidates.columns() {
        let mut v = cand.to_owned();
        for _ in 0..2 {
            for q in &cols {
                let proj = q.dot(&v);
                v.scaled_add(-proj, q);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
    }
    let mut out = Array2::zeros((basis.nrows(), cols.len()));
    for (j, c) in cols.iter().enumerate() {
        out.column_mut(j).assign(c);
    }
    debug_assert!(out.ncols() >= existing);
    out
}

/// Per-layer outcome of a basis update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUpdate {
    pub layer: usize,
    pub added: usize,
    pub rank: usize,
    pub captured: f64,
    pub saturated: bool,
}

/// Grows each layer's basis until it captures an `eps` fraction of the
/// representation energy `||R||_F^2`.
pub fn update_basis(basis: &mut SubspaceBasis, reps: &[Array2<f64>], eps: f64) -> Result<Vec<LayerUpdate>> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::rejected(format!("threshold {eps} must lie in (0, 1]")));
    }
    if reps.len() != basis.layers.len() {
        return Err(Error::rejected(format!(
            "{} representation matrices for {} layers",
            reps.len(),
            basis.layers.len()
        )));
    }
    let mut report = Vec::with_capacity(reps.len());
    for (lb, r) in basis.layers.iter_mut().zip(reps) {
        if r.nrows() != lb.input_dim() {
            return Err(Error::rejected(format!(
                "layer {} representations have {} rows, expected {}",
                lb.layer,
                r.nrows(),
                lb.input_dim()
            )));
        }
        let total: f64 = r.iter().map(|v| v * v).sum();
        let mut added = 0;
        if total > 0.0 {
            let b = &lb.vectors;
            let residual = r - &b.dot(&b.t().dot(r));
            let res_energy: f64 = residual.iter().map(|v| v * v).sum();
            let mut captured = ((total - res_energy) / total).clamp(0.0, 1.0);
            // singular values of R bound those of the residual from above
            let scale = sorted_svd(r).1.first().copied().unwrap_or(0.0);
            if res_energy.sqrt() > SVD_TOLERANCE * scale {
                let (u, sigma) = sorted_svd(&residual);
                let mut take = 0;
                for &sv in &sigma {
                    if captured >= eps || sv <= SVD_TOLERANCE * scale {
                        break;
                    }
                    captured += sv * sv / total;
                    take += 1;
                }
                if take > 0 {
                    let room = lb.input_dim() - lb.rank();
                    if take > room {
                        take = room;
                        lb.saturated = true;
                    }
                    let before = lb.rank();
                    lb.vectors = append_orthonormal(&lb.vectors, &u.slice(s![.., ..take]).to_owned());
                    added = lb.rank() - before;
                }
            }
            lb.captured = captured.min(1.0);
        }
        if lb.rank() == lb.input_dim() {
            lb.saturated = true;
        }
        if lb.saturated {
            log::info!("layer {} saturated at rank {}", lb.layer, lb.rank());
        }
        report.push(LayerUpdate {
            layer: lb.layer,
            added,
            rank: lb.rank(),
            captured: lb.captured,
            saturated: lb.saturated,
        });
    }
    Ok(report)
}

/// Removes from every shared weight gradient its component along the stored
/// input directions: `G <- G - G B B^T`. Biases and heads pass through.
pub fn project_gradient(grad: &mut ParamVector, basis: &SubspaceBasis) {
    let layout = grad.layout().clone();
    for lb in &basis.layers {
        if lb.rank() == 0 {
            continue;
        }
        let Some(seg) = layout.find(SegmentKind::Weight { layer: lb.layer }) else {
            continue;
        };
        let mut g = grad.matrix_mut(seg);
        let coeff = g.dot(&lb.vectors);
        let along = coeff.dot(&lb.vectors.t());
        g -= &along;
    }
}

impl GradientProjector for SubspaceBasis {
    fn project(&self, grad: &mut ParamVector) {
        project_gradient(grad, self);
    }
}

/// Largest `|G B|` entry over all layers, zero when fully projected.
pub fn max_basis_component(grad: &ParamVector, basis: &SubspaceBasis) -> f64 {
    let layout = grad.layout().clone();
    basis
        .layers
        .iter()
        .filter_map(|lb| {
            let seg = layout.find(SegmentKind::Weight { layer: lb.layer })?;
            let c = grad.matrix(seg).dot(&lb.vectors);
            Some(c.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> NetworkSpec {
        NetworkSpec::mlp(3, &[4], Activation::Relu, true, vec![2]).unwrap()
    }

    #[test]
    fn epsilon_schedule_values() {
        let s = EpsilonSchedule::default();
        assert_eq!(epsilon_for_task(&s, 1), 0.97);
        assert!((epsilon_for_task(&s, 2) - 0.973).abs() < 1e-15);
        assert_eq!(epsilon_for_task(&s, 11), 1.0);
        assert_eq!(epsilon_for_task(&s, 40), 1.0);
        let flat = EpsilonSchedule {
            base: 0.9,
            increment: 0.0,
        };
        assert_eq!(epsilon_for_task(&flat, 1), epsilon_for_task(&flat, 7));
        assert!(EpsilonSchedule { base: 1.0, increment: 0.0 }.validate().is_err());
    }

    #[test]
    fn single_unit_column_becomes_the_basis() {
        let mut b = SubspaceBasis::empty(&spec());
        let u = array![[0.6], [0.0], [0.8]];
        let rep = update_basis(&mut b, std::slice::from_ref(&u), 0.97).unwrap();
        assert_eq!(rep[0].added, 1);
        let v = &b.layers()[0].vectors;
        let sign = v[[0, 0]].signum();
        for i in 0..3 {
            assert!((sign * v[[i, 0]] - u[[i, 0]]).abs() < 1e-12);
        }
    }

    #[test]
    fn reps_inside_the_span_leave_basis_unchanged() {
        let mut b = SubspaceBasis::empty(&spec());
        update_basis(&mut b, &[array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]], 1.0).unwrap();
        assert_eq!(b.ranks(), vec![2]);
        let before = b.clone();
        let inside = array![[2.0, -1.0, 0.3], [0.5, 4.0, 0.0], [0.0, 0.0, 0.0]];
        for eps in [0.1, 0.97, 1.0] {
            update_basis(&mut b, std::slice::from_ref(&inside), eps).unwrap();
            assert_eq!(b.ranks(), before.ranks());
        }
    }

    #[test]
    fn energy_threshold_keeps_two_of_three() {
        // cumulative energy fractions 0.90, 0.99, 1.00 against 0.97
        let r = array![[0.9f64.sqrt(), 0.0, 0.0], [0.0, 0.09f64.sqrt(), 0.0], [0.0, 0.0, 0.1]];
        let fractions = [0.9, 0.09, 0.01];
        let mut cum = 0.0;
        let mut expected = 0;
        for f in fractions {
            if cum >= 0.97 {
                break;
            }
            cum += f;
            expected += 1;
        }
        assert_eq!(expected, 2);
        let mut b = SubspaceBasis::empty(&spec());
        update_basis(&mut b, &[r], 0.97).unwrap();
        assert_eq!(b.ranks(), vec![expected]);
    }

    #[test]
    fn bases_grow_monotonically_and_stay_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = NetworkSpec::mlp(12, &[6], Activation::Relu, true, vec![2]).unwrap();
        let mut b = SubspaceBasis::empty(&s);
        let mut last = 0;
        for _ in 0..6 {
            let r = Array2::from_shape_fn((12, 20), |_| rng.random_range(-1.0..1.0));
            update_basis(&mut b, &[r], 0.9).unwrap();
            let l = &b.layers()[0];
            assert!(l.rank() >= last);
            assert!(l.rank() <= 12);
            assert!(l.orthonormality_error() < 1e-8);
            last = l.rank();
        }
        assert!(b.layers()[0].saturated || last < 12);
    }

    #[test]
    fn projection_properties() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut b = SubspaceBasis::empty(&s);
        let mut g = s.init_params(&mut rng);
        let untouched = g.clone();
        project_gradient(&mut g, &b);
        assert_eq!(g, untouched);

        update_basis(&mut b, &[array![[1.0, 1.0], [1.0, -1.0], [0.0, 0.0]]], 1.0).unwrap();
        project_gradient(&mut g, &b);
        assert!(max_basis_component(&g, &b) < 1e-8);
        let once = g.clone();
        project_gradient(&mut g, &b);
        for (a, c) in g.values().iter().zip(once.values()) {
            assert!((a - c).abs() < 1e-14);
        }
        // biases and heads pass through
        for seg in s.layout().segments() {
            if !matches!(seg.kind, SegmentKind::Weight { .. }) {
                assert_eq!(g.segment(seg), untouched.segment(seg));
            }
        }
    }

    #[test]
    fn gradient_rows_in_span_vanish() {
        let s = spec();
        let mut b = SubspaceBasis::empty(&s);
        update_basis(&mut b, &[array![[1.0], [2.0], [2.0]]], 0.9).unwrap();
        let mut g = ParamVector::zeros(s.layout().clone());
        let seg = s.layout().find(SegmentKind::Weight { layer: 0 }).unwrap().clone();
        g.matrix_mut(&seg).row_mut(2).assign(&array![0.5, 1.0, 1.0]);
        project_gradient(&mut g, &b);
        assert!(g.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn full_span_projection_freezes_the_layer() {
        let s = spec();
        let mut b = SubspaceBasis::empty(&s);
        update_basis(&mut b, &[Array2::eye(3)], 1.0).unwrap();
        assert!(b.layers()[0].saturated);
        let p0 = s.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let mut p = p0.clone();
        let g = s.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        nn::sgd_step(&mut p, &g, 1.0, Some(&b)).unwrap();
        let seg = s.layout().find(SegmentKind::Weight { layer: 0 }).unwrap();
        for (a, c) in p.segment(seg).iter().zip(p0.segment(seg)) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn representation_shapes_and_values() {
        let s = spec();
        let p = s.init_params(&mut ChaCha8Rng::seed_from_u64(6));
        let x = Array2::from_shape_fn((10, 3), |(i, j)| (i as f64) - 2.0 * j as f64);
        let d = Dataset::new(x, (0..10).map(|i| i % 2).collect(), 2).unwrap();
        let reps = collect_representations(&s, &p, &d, 1, 1, 0).unwrap();
        assert_eq!(reps.len(), 1);
        assert_eq!(reps[0].dim(), (3, 1));

        let reps = collect_representations(&s, &p, &d, 1, 10, 0).unwrap();
        assert_eq!(reps[0], d.inputs().t().to_owned());

        // hidden layer input checked against a hand-computed ReLU(W1 x + b1)
        let two = NetworkSpec::mlp(3, &[4, 5], Activation::Relu, true, vec![2]).unwrap();
        let p = two.init_params(&mut ChaCha8Rng::seed_from_u64(7));
        let reps = collect_representations(&two, &p, &d, 1, 10, 0).unwrap();
        let w = p.matrix(two.layout().find(SegmentKind::Weight { layer: 0 }).unwrap());
        let b1 = p.segment(two.layout().find(SegmentKind::Bias { layer: 0 }).unwrap());
        for n in 0..10 {
            for h in 0..4 {
                let mut z = b1[h];
                for j in 0..3 {
                    z += w[[h, j]] * d.inputs()[[n, j]];
                }
                assert!((reps[1][[h, n]] - z.max(0.0)).abs() < 1e-12);
            }
        }
        assert!(collect_representations(&s, &p, &d, 1, 11, 0).is_err());
    }

    #[test]
    fn basis_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = SubspaceBasis::empty(&spec());
        update_basis(&mut b, &[array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]], 0.99).unwrap();
        let (bin, json) = (dir.path().join("basis.bin"), dir.path().join("basis.json"));
        b.save(&bin, &json).unwrap();
        assert_eq!(SubspaceBasis::load(&bin, &json).unwrap(), b);
    }
}
