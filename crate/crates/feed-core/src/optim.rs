//! Gradient-descent and Adam parameter updates.

use std::collections::BTreeMap;

use crate::graph::GradientMap;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::TensorError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

/// Optimizer state: kind, learning rate, per-parameter moment accumulators,
/// and a step counter. A zero learning rate is a valid frozen optimizer;
/// negative rates are rejected.
#[derive(Clone, Debug)]
pub struct Optimizer<F: Scalar> {
    kind: OptimizerKind,
    lr: F,
    step_count: u64,
    moment1: BTreeMap<String, Vec<F>>,
    moment2: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn sgd(lr: f64) -> Result<Self, TensorError> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    /// Adam with the standard defaults (0.9, 0.999, 1e-8).
    pub fn adam(lr: f64) -> Result<Self, TensorError> {
        Self::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            lr,
        )
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self, TensorError> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(TensorError::NegativeLearningRate { lr });
        }
        Ok(Self {
            kind,
            lr: F::from_f64(lr),
            step_count: 0,
            moment1: BTreeMap::new(),
            moment2: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.as_f64()
    }

    /// One update over every parameter in the store. Gradients must cover
    /// the store: a missing key is an error, extra gradients are ignored.
    pub fn step(
        &mut self,
        params: &mut ParamStore<F>,
        grads: &GradientMap<F>,
    ) -> Result<(), TensorError> {
        self.step_count += 1;
        let t = self.step_count;
        for (name, tensor) in params.iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| TensorError::MissingGradient { name: name.clone() })?;
            if grad.shape() != tensor.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer-step",
                    detail: format!(
                        "parameter `{name}`: {:?} vs gradient {:?}",
                        tensor.shape(),
                        grad.shape()
                    ),
                });
            }
            let g = grad.data();
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = self.lr;
                    for (p, gv) in tensor.data_mut().iter_mut().zip(g) {
                        *p = *p - lr * *gv;
                    }
                }
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let b1 = F::from_f64(beta1);
                    let b2 = F::from_f64(beta2);
                    let eps = F::from_f64(epsilon);
                    let one = F::one();
                    let corr1 = one - F::from_f64(beta1.powi(t as i32));
                    let corr2 = one - F::from_f64(beta2.powi(t as i32));
                    let m = self
                        .moment1
                        .entry(name.clone())
                        .or_insert_with(|| vec![F::zero(); g.len()]);
                    let v = self
                        .moment2
                        .entry(name.clone())
                        .or_insert_with(|| vec![F::zero(); g.len()]);
                    let lr = self.lr;
                    for (i, (p, gv)) in tensor.data_mut().iter_mut().zip(g).enumerate() {
                        m[i] = b1 * m[i] + (one - b1) * *gv;
                        v[i] = b2 * v[i] + (one - b2) * *gv * *gv;
                        let m_hat = m[i] / corr1;
                        let v_hat = v[i] / corr2;
                        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
