//! Dense row-major tensors carrying optional references into an autodiff graph.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("graph already consumed by backward")]
    GraphConsumed,
    #[error("{op}: input tensor belongs to a different graph")]
    ForeignTensor { op: &'static str },
    #[error("missing gradient for parameter `{name}`")]
    MissingGradient { name: String },
    #[error("parameter `{name}` registered twice with conflicting shapes")]
    ParamShapeConflict { name: String },
    #[error("learning rate must be nonnegative, got {lr}")]
    NegativeLearningRate { lr: f64 },
    #[error("unknown parameter `{name}`")]
    UnknownParam { name: String },
    #[error("invalid tensor: shape {shape:?} does not match {len} data values")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
}

/// Position of a tensor inside a specific graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) graph: u64,
    pub(crate) index: usize,
}

/// Dense multi-dimensional array. Scalars are rank-0 (empty shape, one value).
#[derive(Clone, Debug)]
pub struct TensorBase<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub(crate) node: Option<NodeRef>,
}

impl<F: Scalar> PartialEq for TensorBase<F> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<F: Scalar> TensorBase<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            node: None,
        })
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            node: None,
        }
    }

    /// Single row matrix `[1, n]`, the layout used for one example.
    pub fn row(values: Vec<F>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
            node: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, TensorError> {
        Self::from_vec(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
            node: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        self.node = None;
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Extract the single value of a scalar tensor.
    pub fn value(&self) -> Result<F, TensorError> {
        if !self.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        match self.shape.last() {
            Some(&last) if last > 0 => self.data.len() / last,
            _ => 1,
        }
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row_slice(&self, row: usize) -> &[F] {
        let w = self.last_dim();
        &self.data[row * w..(row + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and payload.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Vec<F>, node: NodeRef) -> Self {
        Self {
            shape,
            data,
            node: Some(node),
        }
    }

    /// Detached copy with no graph reference.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }
}

impl TensorBase<f64> {
    pub fn from_f64_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_f64_rows",
                    detail: format!("row lengths differ: {} vs {}", cols, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(vec![rows.len(), cols], data)
    }
}
