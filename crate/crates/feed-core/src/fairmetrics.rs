//! Exact counting implementations of the group-fairness metrics and the
//! per-domain evaluation report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DomainDataset;
use crate::meta::{ClassifierParams, MetaError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("sensitive group {group} is empty")]
    MissingGroup { group: i8 },
    #[error("sensitive group {group} has no positive examples")]
    NoPositives { group: i8 },
    #[error("sensitive group {group} has no examples with label {label}")]
    MissingLabel { group: i8, label: u8 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("prediction and label slices have different lengths")]
    LengthMismatch,
}

fn check_lengths(lens: &[usize]) -> Result<(), MetricError> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(MetricError::LengthMismatch);
    }
    Ok(())
}

/// Absolute difference of positive prediction rates between the two groups.
pub fn delta_dp(preds: &[u8], z: &[i8]) -> Result<f64, MetricError> {
    check_lengths(&[preds.len(), z.len()])?;
    let mut counts = [(0usize, 0usize); 2]; // (positives, total) per group
    for (p, zv) in preds.iter().zip(z) {
        let g = if *zv > 0 { 1 } else { 0 };
        counts[g].1 += 1;
        if *p == 1 {
            counts[g].0 += 1;
        }
    }
    if counts[0].1 == 0 {
        return Err(MetricError::MissingGroup { group: -1 });
    }
    if counts[1].1 == 0 {
        return Err(MetricError::MissingGroup { group: 1 });
    }
    let rate_neg = counts[0].0 as f64 / counts[0].1 as f64;
    let rate_pos = counts[1].0 as f64 / counts[1].1 as f64;
    Ok((rate_neg - rate_pos).abs())
}

fn rate_given(
    preds: &[u8],
    y: &[u8],
    z: &[i8],
    group: i8,
    label: u8,
) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ((p, yv), zv) in preds.iter().zip(y).zip(z) {
        if *zv == group && *yv == label {
            total += 1;
            if *p == 1 {
                hits += 1;
            }
        }
    }
    if total == 0 {
        None
    } else {
        Some(hits as f64 / total as f64)
    }
}

/// Absolute true-positive-rate gap between the two groups.
pub fn delta_eopp(preds: &[u8], y: &[u8], z: &[i8]) -> Result<f64, MetricError> {
    check_lengths(&[preds.len(), y.len(), z.len()])?;
    let tpr_neg =
        rate_given(preds, y, z, -1, 1).ok_or(MetricError::NoPositives { group: -1 })?;
    let tpr_pos = rate_given(preds, y, z, 1, 1).ok_or(MetricError::NoPositives { group: 1 })?;
    Ok((tpr_neg - tpr_pos).abs())
}

/// Half the sum of the absolute TPR and FPR gaps.
pub fn delta_eo(preds: &[u8], y: &[u8], z: &[i8]) -> Result<f64, MetricError> {
    check_lengths(&[preds.len(), y.len(), z.len()])?;
    let mut rates = [[0.0; 2]; 2]; // [group index][label]
    for (group, gi) in [(-1i8, 0usize), (1i8, 1usize)] {
        for label in [0u8, 1u8] {
            rates[gi][label as usize] = rate_given(preds, y, z, group, label)
                .ok_or(MetricError::MissingLabel { group, label })?;
        }
    }
    let tpr_gap = (rates[0][1] - rates[1][1]).abs();
    let fpr_gap = (rates[0][0] - rates[1][0]).abs();
    Ok(0.5 * (tpr_gap + fpr_gap))
}

/// A metric value or the reason it could not be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricOutcome {
    Value(f64),
    Absent(String),
}

impl MetricOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            MetricOutcome::Value(v) => Some(*v),
            MetricOutcome::Absent(_) => None,
        }
    }

    pub fn from_result(r: Result<f64, MetricError>) -> Self {
        match r {
            Ok(v) => MetricOutcome::Value(v),
            Err(e) => MetricOutcome::Absent(e.to_string()),
        }
    }

    /// CSV field: the value, or `NA` when absent.
    pub fn csv_field(&self) -> String {
        match self {
            MetricOutcome::Value(v) => format!("{v}"),
            MetricOutcome::Absent(_) => "NA".to_string(),
        }
    }
}

/// Accuracy plus the three group-fairness gaps on one evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairReport {
    pub domain: String,
    pub size: usize,
    /// (count of z = -1, count of z = +1)
    pub group_counts: (usize, usize),
    pub accuracy: f64,
    pub delta_dp: MetricOutcome,
    pub delta_eopp: MetricOutcome,
    pub delta_eo: MetricOutcome,
}

/// Hard predictions at the threshold; exact ties predict 1.
pub fn hard_predictions(
    clf: &ClassifierParams,
    dataset: &DomainDataset,
    threshold: f64,
) -> Result<Vec<u8>, MetaError> {
    let mut preds = Vec::with_capacity(dataset.len());
    for chunk in dataset.examples.chunks(256) {
        let mut g = crate::graph::Graph::new();
        let x = crate::batches::features_tensor(chunk)?;
        let probs = clf.arch.forward(&mut g, &clf.params, &x)?;
        for i in 0..chunk.len() {
            let p1 = probs.row_slice(i)[1];
            preds.push(if p1 >= threshold { 1 } else { 0 });
        }
    }
    Ok(preds)
}

/// Evaluate a classifier on one domain. Metric errors downgrade that metric
/// to absent-with-reason instead of failing the run.
pub fn evaluate_model(
    clf: &ClassifierParams,
    dataset: &DomainDataset,
    threshold: f64,
) -> Result<FairReport, MetaError> {
    if dataset.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    let preds = hard_predictions(clf, dataset, threshold)?;
    let y: Vec<u8> = dataset.examples.iter().map(|e| e.y).collect();
    let z: Vec<i8> = dataset.examples.iter().map(|e| e.z).collect();
    let correct = preds.iter().zip(&y).filter(|(p, yv)| p == yv).count();
    let neg = z.iter().filter(|v| **v < 0).count();
    Ok(FairReport {
        domain: dataset.domain.clone(),
        size: dataset.len(),
        group_counts: (neg, dataset.len() - neg),
        accuracy: correct as f64 / dataset.len() as f64,
        delta_dp: MetricOutcome::from_result(delta_dp(&preds, &z)),
        delta_eopp: MetricOutcome::from_result(delta_eopp(&preds, &y, &z)),
        delta_eo: MetricOutcome::from_result(delta_eo(&preds, &y, &z)),
    })
}
