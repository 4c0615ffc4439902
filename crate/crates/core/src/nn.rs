//! Multi-head feed-forward networks with exact backpropagation.
//!
//! A network is a stack of shared linear layers followed by one linear
//! classifier head per task. Parameters live in a single [`ParamVector`];
//! weight segments are row-major `out x in` matrices.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Layout, ParamVector, Segment, SegmentKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// One shared linear layer followed by an elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub input: usize,
    pub output: usize,
    pub bias: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct NetworkSpec {
    input_dim: usize,
    layers: Vec<LinearSpec>,
    head_classes: Vec<usize>,
    layout: Arc<Layout>,
}

impl NetworkSpec {
    /// `head_classes[t - 1]` is the class count of task `t`'s head.
    pub fn new(input_dim: usize, layers: Vec<LinearSpec>, head_classes: Vec<usize>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::rejected("input dimension must be positive"));
        }
        let mut width = input_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.input != width {
                return Err(Error::rejected(format!(
                    "layer {i} expects input width {} but receives {width}",
                    l.input
                )));
            }
            if l.output == 0 {
                return Err(Error::rejected(format!("layer {i} has zero output width")));
            }
            width = l.output;
        }
        if head_classes.is_empty() {
            return Err(Error::rejected("network needs at least one head"));
        }
        if let Some(t) = head_classes.iter().position(|&c| c < 2) {
            return Err(Error::rejected(format!(
                "head for task {} has fewer than 2 classes",
                t + 1
            )));
        }

        let mut shapes = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            shapes.push((format!("layer{i}.weight"), SegmentKind::Weight { layer: i }, l.output, l.input));
            if l.bias {
                shapes.push((format!("layer{i}.bias"), SegmentKind::Bias { layer: i }, l.output, 1));
            }
        }
        for (i, &c) in head_classes.iter().enumerate() {
            let task = i + 1;
            shapes.push((format!("head{task}.weight"), SegmentKind::HeadWeight { task }, c, width));
            shapes.push((format!("head{task}.bias"), SegmentKind::HeadBias { task }, c, 1));
        }
        Ok(NetworkSpec {
            input_dim,
            layers,
            head_classes,
            layout: Arc::new(Layout::from_shapes(shapes)),
        })
    }

    /// Fully connected net with equal activation on every hidden layer.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        activation: Activation,
        hidden_bias: bool,
        head_classes: Vec<usize>,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(LinearSpec {
                input: width,
                output: h,
                bias: hidden_bias,
                activation,
            });
            width = h;
        }
        Self::new(input_dim, layers, head_classes)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[LinearSpec] {
        &self.layers
    }

    pub fn num_tasks(&self) -> usize {
        self.head_classes.len()
    }

    pub fn head_classes(&self, task: usize) -> Option<usize> {
        task.checked_sub(1).and_then(|i| self.head_classes.get(i)).copied()
    }

    /// Width feeding the heads.
    pub fn penultimate_width(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.output)
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn weight(&self, layer: usize) -> &Segment {
        self.layout.find(SegmentKind::Weight { layer }).expect("weight segment")
    }

    fn bias(&self, layer: usize) -> Option<&Segment> {
        self.layout.find(SegmentKind::Bias { layer })
    }

    fn head(&self, task: usize) -> (&Segment, &Segment) {
        (
            self.layout.find(SegmentKind::HeadWeight { task }).expect("head weight"),
            self.layout.find(SegmentKind::HeadBias { task }).expect("head bias"),
        )
    }

    /// Uniform Glorot initialization of every weight matrix; biases zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout.clone());
        for seg in self.layout.segments() {
            if matches!(seg.kind, SegmentKind::Weight { .. } | SegmentKind::HeadWeight { .. }) {
                let bound = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
                for v in p.segment_mut(seg) {
                    *v = rng.random_range(-bound..=bound);
                }
            }
        }
        p
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if **params.layout() != *self.layout {
            return Err(Error::rejected("parameter layout does not match network"));
        }
        if let Some(j) = params.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("parameter {j} is not finite")));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch<'_>) -> Result<usize> {
        let classes = self
            .head_classes(batch.task)
            .ok_or_else(|| Error::rejected(format!("no head for task {}", batch.task)))?;
        if batch.inputs.ncols() != self.input_dim {
            return Err(Error::rejected(format!(
                "batch has {} features, network expects {}",
                batch.inputs.ncols(),
                self.input_dim
            )));
        }
        if batch.inputs.nrows() != batch.labels.len() {
            return Err(Error::rejected(format!(
                "batch has {} rows but {} labels",
                batch.inputs.nrows(),
                batch.labels.len()
            )));
        }
        if let Some(i) = batch.labels.iter().position(|&y| y >= classes) {
            return Err(Error::rejected(format!(
                "label {} at row {i} is out of range for {classes} classes",
                batch.labels[i]
            )));
        }
        Ok(classes)
    }
}

/// Labeled rows evaluated on one task's head.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    pub task: usize,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: ArrayView2<'a, f64>, labels: &'a [usize], task: usize) -> Self {
        Batch { inputs, labels, task }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// `n x classes` logits of the active head.
    pub logits: Array2<f64>,
    /// Input matrix (`n x width`) of every linear layer, the active head last.
    pub activations: Vec<Array2<f64>>,
}

pub fn forward(spec: &NetworkSpec, params: &ParamVector, batch: &Batch<'_>) -> Result<Forward> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    Ok(forward_unchecked(spec, params, batch))
}

fn affine(x: &ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: Option<&[f64]>) -> Array2<f64> {
    let mut z = x.dot(&w.t());
    if !z.is_standard_layout() {
        z = z.as_standard_layout().into_owned();
    }
    if let Some(b) = b {
        let b = ndarray::ArrayView1::from(b);
        z += &b;
    }
    z
}

fn forward_unchecked(spec: &NetworkSpec, params: &ParamVector, batch: &Batch<'_>) -> Forward {
    let mut activations = Vec::with_capacity(spec.layers.len() + 1);
    let mut current = batch.inputs.to_owned();
    for (i, layer) in spec.layers.iter().enumerate() {
        let w = params.matrix(spec.weight(i));
        let b = spec.bias(i).map(|s| params.segment(s));
        let mut z = affine(&current.view(), w, b);
        z.mapv_inplace(|v| layer.activation.apply(v));
        activations.push(current);
        current = z;
    }
    let (hw, hb) = spec.head(batch.task);
    let logits = affine(&current.view(), params.matrix(hw), Some(params.segment(hb)));
    activations.push(current);
    Forward { logits, activations }
}

/// Row-wise softmax, numerically stabilized.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    p
}

/// Mean cross-entropy of `logits` against `labels`, with per-row log-sum-exp.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / n as f64
}

/// Mean cross-entropy over the batch and its exact gradient.
///
/// Gradients of heads other than `batch.task` are exactly zero.
pub fn loss_and_grad(spec: &NetworkSpec, params: &ParamVector, batch: &Batch<'_>) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let fwd = forward_unchecked(spec, params, batch);
    let loss = cross_entropy(&fwd.logits, batch.labels);
    if !loss.is_finite() {
        return Err(Error::numerical("loss is not finite"));
    }

    let n = batch.len() as f64;
    let mut delta = softmax(&fwd.logits);
    for (mut row, &y) in delta.rows_mut().into_iter().zip(batch.labels) {
        row[y] -= 1.0;
    }
    delta /= n;

    let mut grad = params.zeros_like();
    let (hw, hb) = spec.head(batch.task);
    let penult = fwd.activations.last().expect("head input");
    grad.matrix_mut(hw).assign(&delta.t().dot(penult));
    grad.segment_mut(hb)
        .iter_mut()
        .zip(delta.sum_axis(Axis(0)))
        .for_each(|(g, d)| *g = d);
    let mut delta = delta.dot(&params.matrix(hw));

    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let out = &fwd.activations[i + 1];
        ndarray::Zip::from(&mut delta)
            .and(out)
            .for_each(|d, &y| *d *= layer.activation.derivative_from_output(y));
        let w = spec.weight(i);
        grad.matrix_mut(w).assign(&delta.t().dot(&fwd.activations[i]));
        if let Some(b) = spec.bias(i) {
            grad.segment_mut(b)
                .iter_mut()
                .zip(delta.sum_axis(Axis(0)))
                .for_each(|(g, d)| *g = d);
        }
        if i > 0 {
            delta = delta.dot(&params.matrix(w));
        }
    }
    Ok((loss, grad))
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(spec: &NetworkSpec, params: &ParamVector, batch: &Batch<'_>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::rejected("accuracy of an empty batch"));
    }
    let fwd = forward(spec, params, batch)?;
    let correct = fwd
        .logits
        .rows()
        .into_iter()
        .zip(batch.labels)
        .filter(|(row, &y)| argmax(row.as_slice().expect("contiguous logits")) == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest entry; ties resolve to the lowest index.
pub fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// Modifies a gradient in place before it is applied.
pub trait GradientProjector {
    fn project(&self, grad: &mut ParamVector);
}

/// `params <- params - lr * P(grad)`, `P` the identity when no projector is given.
pub fn sgd_step(
    params: &mut ParamVector,
    grad: &ParamVector,
    lr: f64,
    projector: Option<&dyn GradientProjector>,
) -> Result<()> {
    params.check_layout(grad, "sgd_step")?;
    if !(lr >= 0.0) {
        return Err(Error::rejected(format!("learning rate {lr} is negative")));
    }
    match projector {
        Some(p) => {
            let mut g = grad.clone();
            p.project(&mut g);
            params.axpy(-lr, &g)
        }
        None => params.axpy(-lr, grad),
    }
}

/// Copies the selected rows into a contiguous matrix.
pub fn gather_rows(inputs: &ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), inputs.ncols()));
    for (dst, &r) in rows.iter().enumerate() {
        out.slice_mut(s![dst, ..]).assign(&inputs.row(r));
    }
    out
}
