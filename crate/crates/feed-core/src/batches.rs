//! Conversions between example batches and tensors, plus shared loss nodes.

use crate::data::Example;
use crate::graph::Graph;
use crate::tensor::{TensorBase, TensorError};

/// Stack feature vectors into a `[batch, dim]` tensor.
pub(crate) fn features_tensor(batch: &[Example]) -> Result<TensorBase<f64>, TensorError> {
    let rows: Vec<Vec<f64>> = batch.iter().map(|e| e.x.clone()).collect();
    TensorBase::from_f64_rows(&rows)
}

/// One-hot rows for the two-class labels `classes[i] in {0, 1}`.
pub(crate) fn one_hot(classes: &[usize]) -> Result<TensorBase<f64>, TensorError> {
    let mut data = vec![0.0; classes.len() * 2];
    for (i, c) in classes.iter().enumerate() {
        data[i * 2 + c] = 1.0;
    }
    TensorBase::from_vec(vec![classes.len(), 2], data)
}

pub(crate) fn class_labels(batch: &[Example]) -> Vec<usize> {
    batch.iter().map(|e| e.y as usize).collect()
}

pub(crate) fn sensitive_classes(batch: &[Example]) -> Vec<usize> {
    batch.iter().map(|e| e.z_class()).collect()
}

/// Mean cross-entropy of probability rows against class indices.
pub(crate) fn cross_entropy_node(
    g: &mut Graph<f64>,
    probs: &TensorBase<f64>,
    classes: &[usize],
) -> Result<TensorBase<f64>, TensorError> {
    let mask = one_hot(classes)?;
    let mask = g.constant(&mask)?;
    let logs = g.log(probs)?;
    let picked = g.mul(&logs, &mask)?;
    let total = g.sum(&picked)?;
    g.scalar_mul(&total, -1.0 / classes.len() as f64)
}
