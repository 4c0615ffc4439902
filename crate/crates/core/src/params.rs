//! Flat parameter vectors with a named segment layout.

use std::sync::Arc;

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a segment of the parameter vector holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentKind {
    /// Weight matrix of shared hidden layer `layer` (0-based), `out x in`, row-major.
    Weight { layer: usize },
    Bias { layer: usize },
    /// Classifier head of task `task` (1-based).
    HeadWeight { task: usize },
    HeadBias { task: usize },
}

impl SegmentKind {
    pub fn is_head(&self) -> bool {
        matches!(self, SegmentKind::HeadWeight { .. } | SegmentKind::HeadBias { .. })
    }

    pub fn head_task(&self) -> Option<usize> {
        match *self {
            SegmentKind::HeadWeight { task } | SegmentKind::HeadBias { task } => Some(task),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    #[serde(flatten)]
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
    /// Matrix shape; biases are `len x 1`.
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered segments tiling a parameter vector exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    /// Builds a layout from `(name, kind, rows, cols)` entries laid out back to back.
    pub fn from_shapes(shapes: impl IntoIterator<Item = (String, SegmentKind, usize, usize)>) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        for (name, kind, rows, cols) in shapes {
            let len = rows * cols;
            segments.push(Segment {
                name,
                kind,
                offset,
                len,
                rows,
                cols,
            });
            offset += len;
        }
        Layout {
            segments,
            total: offset,
        }
    }

    /// Validates a deserialized layout: contiguous, gap-free, shape-consistent.
    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for s in &self.segments {
            if s.offset != expected {
                return Err(Error::format(
                    format!("layout.{}", s.name),
                    format!("offset {} but expected {}", s.offset, expected),
                ));
            }
            if s.rows * s.cols != s.len {
                return Err(Error::format(
                    format!("layout.{}", s.name),
                    format!("shape {}x{} does not match length {}", s.rows, s.cols, s.len),
                ));
            }
            expected += s.len;
        }
        if expected != self.total {
            return Err(Error::format(
                "layout.total",
                format!("segments cover {} values, total is {}", expected, self.total),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn find(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    pub fn by_name(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Real-valued parameter vector together with its layout.
#[derive(Debug, Clone)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.same_layout(other) && self.values == other.values
    }
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::rejected(format!(
                "parameter vector has {} values, layout expects {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector::zeros(self.layout.clone())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_layout(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::rejected(format!("layout mismatch in {what}")))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn segment(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.range()]
    }

    pub fn segment_mut(&mut self, seg: &Segment) -> &mut [f64] {
        &mut self.values[seg.range()]
    }

    /// Row-major `rows x cols` view of a segment.
    pub fn matrix(&self, seg: &Segment) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((seg.rows, seg.cols), self.segment(seg)).expect("segment shape")
    }

    pub fn matrix_mut(&mut self, seg: &Segment) -> ArrayViewMut2<'_, f64> {
        let (rows, cols) = (seg.rows, seg.cols);
        ArrayViewMut2::from_shape((rows, cols), self.segment_mut(seg)).expect("segment shape")
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_layout(other, "axpy")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other, "sub")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamVector {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Diagonal quadratic form `sum_j diag_j * v_j^2`.
    pub fn diag_quadratic(&self, diag: &[f64]) -> f64 {
        self.values
            .iter()
            .zip(diag)
            .map(|(v, d)| d * v * v)
            .sum()
    }
}
