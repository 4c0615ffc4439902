//! Task streams: synthetic Gaussian-mixture tasks and class splits of IDX datasets.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{gather_rows, Batch};
use crate::seed::{self, tag};

/// Labeled samples, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::rejected("dataset has no samples"));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::rejected(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        let mut counts = vec![0usize; classes];
        for (i, &y) in labels.iter().enumerate() {
            *counts
                .get_mut(y)
                .ok_or_else(|| Error::rejected(format!("label {y} at sample {i} exceeds {classes} classes")))? += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::rejected(format!("class {c} has no samples")));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
        })
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn batch(&self, task: usize) -> Batch<'_> {
        Batch::new(self.inputs.view(), &self.labels, task)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = gather_rows(&self.inputs.view(), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// 1-based task identity.
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
}

impl Task {
    pub fn classes(&self) -> usize {
        self.train.classes()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<Task>,
    input_dim: usize,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        let first = tasks.first().ok_or_else(|| Error::rejected("task stream is empty"))?;
        let input_dim = first.train.dim();
        for (i, t) in tasks.iter().enumerate() {
            if t.id != i + 1 {
                return Err(Error::rejected(format!("task at position {} has id {}", i + 1, t.id)));
            }
            if t.train.dim() != input_dim || t.test.dim() != input_dim {
                return Err(Error::rejected(format!("task {} has a different input dimensionality", t.id)));
            }
            if t.train.classes() != t.test.classes() {
                return Err(Error::rejected(format!("task {} train/test label spaces differ", t.id)));
            }
        }
        Ok(TaskStream { tasks, input_dim })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, id: usize) -> Option<&Task> {
        id.checked_sub(1).and_then(|i| self.tasks.get(i))
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn head_classes(&self) -> Vec<usize> {
        self.tasks.iter().map(Task::classes).collect()
    }

    /// Splits a train/test pair into `classes / k` tasks of `k` consecutive classes.
    pub fn split(train: &Dataset, test: &Dataset, k: usize, class_order: Option<&[usize]>) -> Result<Self> {
        let train_parts = split_with_order(train, k, class_order)?;
        let test_parts = split_with_order(test, k, class_order)?;
        let tasks = train_parts
            .into_iter()
            .zip(test_parts)
            .enumerate()
            .map(|(i, (tr, te))| Task {
                id: i + 1,
                train: tr.dataset,
                test: te.dataset,
            })
            .collect();
        TaskStream::new(tasks)
    }
}

/// One task's share of a split dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub dataset: Dataset,
    /// Row index of each sample in the source dataset.
    pub source_indices: Vec<usize>,
    /// Original label of each remapped label `0..k`.
    pub original_classes: Vec<usize>,
}

/// Splits by ascending original label into groups of `k` classes, remapping labels to `0..k`.
pub fn split_by_class(dataset: &Dataset, k: usize) -> Result<Vec<Split>> {
    split_with_order(dataset, k, None)
}

/// Seeded permutation of class labels, for shuffled class orders.
pub fn permuted_class_order(classes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut seed::rng(seed, tag::STREAM, u64::MAX));
    order
}

fn split_with_order(dataset: &Dataset, k: usize, class_order: Option<&[usize]>) -> Result<Vec<Split>> {
    let classes = dataset.classes();
    if k == 0 {
        return Err(Error::rejected("classes per task must be positive"));
    }
    if !classes.is_multiple_of(k) {
        return Err(Error::rejected(format!(
            "{classes} classes are not divisible by {k} (remainder {})",
            classes % k
        )));
    }
    let order: Vec<usize> = match class_order {
        Some(o) => {
            let mut sorted = o.to_vec();
            sorted.sort_unstable();
            if sorted != (0..classes).collect::<Vec<_>>() {
                return Err(Error::rejected("class order is not a permutation of the labels"));
            }
            o.to_vec()
        }
        None => (0..classes).collect(),
    };
    // position of each original class in the order
    let mut rank = vec![0usize; classes];
    for (pos, &c) in order.iter().enumerate() {
        rank[c] = pos;
    }
    let tasks = classes / k;
    let mut indices = vec![Vec::new(); tasks];
    for (i, &y) in dataset.labels().iter().enumerate() {
        indices[rank[y] / k].push(i);
    }
    indices
        .into_iter()
        .enumerate()
        .map(|(t, idx)| {
            let (x, y) = dataset.subset(&idx);
            let y = y.into_iter().map(|c| rank[c] % k).collect();
            Ok(Split {
                dataset: Dataset::new(x, y, k)?,
                source_indices: idx,
                original_classes: order[t * k..(t + 1) * k].to_vec(),
            })
        })
        .collect()
}

/// Parameters of the synthetic Gaussian-mixture stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianStreamSpec {
    pub tasks: usize,
    pub dim: usize,
    pub classes_per_task: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub separation: f64,
}

/// Independent Gaussian-mixture tasks: class means uniform on a sphere of radius
/// `separation`, unit isotropic noise, balanced class labels.
pub fn synthetic_gaussians(seed: u64, spec: &GaussianStreamSpec) -> Result<TaskStream> {
    let GaussianStreamSpec {
        tasks,
        dim,
        classes_per_task: k,
        n_train,
        n_test,
        separation,
    } = *spec;
    if tasks == 0 || dim == 0 || n_train == 0 || n_test == 0 {
        return Err(Error::rejected("synthetic stream counts must be at least 1"));
    }
    if k < 2 {
        return Err(Error::rejected("synthetic tasks need at least 2 classes"));
    }
    if n_train < k || n_test < k {
        return Err(Error::rejected("every class needs at least one train and test sample"));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::rejected(format!("separation {separation} must be finite and nonnegative")));
    }

    let mut out = Vec::with_capacity(tasks);
    for t in 1..=tasks {
        let mut rng = seed::rng(seed, tag::STREAM, t as u64);
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|a| separation * a / norm).collect()
            })
            .collect();
        let draw = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Result<Dataset> {
            let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            labels.shuffle(rng);
            let mut x = Array2::zeros((n, dim));
            for (mut row, &y) in x.rows_mut().into_iter().zip(&labels) {
                for (v, m) in row.iter_mut().zip(&means[y]) {
                    *v = m + rng.sample::<f64, _>(StandardNormal);
                }
            }
            Dataset::new(x, labels, k)
        };
        let train = draw(n_train, &mut rng)?;
        let test = draw(n_test, &mut rng)?;
        out.push(Task { id: t, train, test });
    }
    TaskStream::new(out)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(field, "file truncated inside the header"))
}

/// Parses an IDX image/label pair; pixels are scaled by 1/255 and flattened row-major.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32(images, 0, "images.magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format("images.magic", format!("expected 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let n = read_u32(images, 4, "images.count")? as usize;
    let rows = read_u32(images, 8, "images.rows")? as usize;
    let cols = read_u32(images, 12, "images.cols")? as usize;
    let pixels = &images[16..];
    let need = n * rows * cols;
    if pixels.len() < need {
        return Err(Error::format(
            "images.data",
            format!("truncated: {need} pixel bytes declared, {} present", pixels.len()),
        ));
    }

    let magic = read_u32(labels, 0, "labels.magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format("labels.magic", format!("expected 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let m = read_u32(labels, 4, "labels.count")? as usize;
    if m != n {
        return Err(Error::format("labels.count", format!("{m} labels for {n} images")));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < m {
        return Err(Error::format(
            "labels.data",
            format!("truncated: {m} labels declared, {} present", label_bytes.len()),
        ));
    }

    let x = Array2::from_shape_vec((n, rows * cols), pixels[..need].iter().map(|&b| f64::from(b) / 255.0).collect())
        .expect("idx shape");
    let y: Vec<usize> = label_bytes[..m].iter().map(|&b| usize::from(b)).collect();
    let classes = y.iter().copied().max().map_or(0, |c| c + 1);
    Dataset::new(x, y, classes)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    parse_idx(&img, &lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, r: u32, c: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, r, c] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn two_image_fixture_round_trips() {
        // byte-by-byte fixture: two 2x3 images
        let images = [
            0x00, 0x00, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3, //
            0, 51, 102, 153, 204, 255, //
            255, 0, 0, 0, 0, 255,
        ];
        let labels = [0x00, 0x00, 0x08, 0x01, 0, 0, 0, 2, 1, 0];
        let d = parse_idx(&images, &labels).unwrap();
        assert_eq!(d.inputs().dim(), (2, 6));
        assert_eq!(d.inputs().row(0).to_vec(), vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(d.inputs().row(1).to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(d.labels(), &[1, 0]);
        assert_eq!(d.classes(), 2);
    }

    #[test]
    fn idx_errors_name_the_field() {
        let labels = idx_labels(&[0, 1]);
        let mut bad = idx_images(2, 1, 1, &[1, 2]);
        bad[3] = 0x04;
        let err = parse_idx(&bad, &labels).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "images.magic"));

        let err = parse_idx(&idx_images(3, 1, 1, &[1, 2, 3]), &labels).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "labels.count"));

        let err = parse_idx(&idx_images(2, 2, 2, &[1, 2, 3]), &labels).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "images.data"));

        let err = parse_idx(&idx_images(2, 1, 1, &[1, 2])[..10], &labels).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "images.rows"));
    }

    fn ten_class_fixture(per_class: usize) -> Dataset {
        let n = 10 * per_class;
        let labels: Vec<usize> = (0..n).map(|i| (i * 7) % 10).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        Dataset::new(x, labels, 10).unwrap()
    }

    #[test]
    fn ten_classes_in_pairs() {
        let d = ten_class_fixture(4);
        let parts = split_by_class(&d, 2).unwrap();
        assert_eq!(parts.len(), 5);
        assert_eq!(parts[0].original_classes, vec![0, 1]);
        for (row, &src) in parts[0].source_indices.iter().enumerate() {
            assert_eq!(parts[0].dataset.labels()[row], d.labels()[src]);
        }
        assert_eq!(parts[3].original_classes, vec![6, 7]);
        assert!(parts[3].dataset.labels().iter().all(|&y| y < 2));
    }

    #[test]
    fn whole_split_is_identity() {
        let d = ten_class_fixture(2);
        let parts = split_by_class(&d, 10).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].dataset, d);
    }

    #[test]
    fn forty_samples_into_two_tasks_by_counting() {
        let d = ten_class_fixture(4);
        let parts = split_by_class(&d, 5).unwrap();
        assert_eq!(parts.len(), 2);
        // brute-force count of source labels below / above 5
        let low = d.labels().iter().filter(|&&y| y < 5).count();
        assert_eq!(parts[0].dataset.len(), low);
        assert_eq!(parts[1].dataset.len(), 40 - low);
        assert_eq!(low, 20);
        for p in &parts {
            let mut counts = [0; 5];
            p.dataset.labels().iter().for_each(|&y| counts[y] += 1);
            assert_eq!(counts, [4; 5]);
        }
    }

    #[test]
    fn non_divisible_split_reports_remainder() {
        let d = ten_class_fixture(1);
        let err = split_by_class(&d, 3).unwrap_err();
        assert!(err.to_string().contains("remainder 1"));
    }

    #[test]
    fn permuted_order_is_a_permutation() {
        let order = permuted_class_order(10, 5);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let d = ten_class_fixture(2);
        let s = TaskStream::split(&d, &d, 5, Some(&order)).unwrap();
        assert_eq!(s.len(), 2);
    }

    fn spec(separation: f64, dim: usize) -> GaussianStreamSpec {
        GaussianStreamSpec {
            tasks: 3,
            dim,
            classes_per_task: 2,
            n_train: 200,
            n_test: 400,
            separation,
        }
    }

    #[test]
    fn synthetic_stream_is_deterministic() {
        let a = synthetic_gaussians(11, &spec(3.0, 5)).unwrap();
        let b = synthetic_gaussians(11, &spec(3.0, 5)).unwrap();
        assert_eq!(a, b);
        let c = synthetic_gaussians(12, &spec(3.0, 5)).unwrap();
        assert_ne!(a, c);
    }

    fn class_means(d: &Dataset) -> Vec<Vec<f64>> {
        let mut sums = vec![vec![0.0; d.dim()]; d.classes()];
        let mut counts = vec![0.0; d.classes()];
        for (row, &y) in d.inputs().rows().into_iter().zip(d.labels()) {
            sums[y].iter_mut().zip(row).for_each(|(s, v)| *s += v);
            counts[y] += 1.0;
        }
        sums.into_iter()
            .zip(counts)
            .map(|(s, c)| s.into_iter().map(|v| v / c).collect())
            .collect()
    }

    fn nearest_mean_accuracy(means: &[Vec<f64>], test: &Dataset) -> f64 {
        let correct = test
            .inputs()
            .rows()
            .into_iter()
            .zip(test.labels())
            .filter(|(row, &y)| {
                let d: Vec<f64> = means
                    .iter()
                    .map(|m| m.iter().zip(row.iter()).map(|(a, b)| (a - b).powi(2)).sum())
                    .collect();
                crate::nn::argmin(&d) == y
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn zero_separation_is_chance_level() {
        // all classes share the origin: the Bayes-optimal rule is constant
        let s = synthetic_gaussians(4, &spec(0.0, 10)).unwrap();
        for t in s.tasks() {
            let means = vec![vec![0.0; 10]; 2];
            let acc = nearest_mean_accuracy(&means, &t.test);
            assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
        }
    }

    #[test]
    fn wide_separation_is_nearly_perfect() {
        let s = synthetic_gaussians(4, &spec(8.0, 10)).unwrap();
        for t in s.tasks() {
            let acc = nearest_mean_accuracy(&class_means(&t.train), &t.test);
            assert!(acc >= 0.99, "accuracy {acc}");
        }
    }

    #[test]
    fn split_stream_partitions_samples() {
        let d = ten_class_fixture(3);
        let parts = split_by_class(&d, 2).unwrap();
        let mut all: Vec<usize> = parts.iter().flat_map(|p| p.source_indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
        for p in &parts {
            let mut seen: Vec<usize> = p.dataset.labels().to_vec();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen, vec![0, 1]);
        }
    }
}
