//! Parameter stores and fully-connected networks.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::Rng;

use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::{TensorBase, TensorError};

/// Named trainable tensors with deterministic iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Scalar> {
    params: BTreeMap<String, TensorBase<F>>,
}

impl<F: Scalar> PartialEq for ParamStore<F> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, tensor: TensorBase<F>) {
        self.params.insert(name, tensor.detached());
    }

    pub fn get(&self, name: &str) -> Option<&TensorBase<F>> {
        self.params.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorBase<F>, TensorError> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorBase<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut TensorBase<F>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Copy every tensor of `other` into this store under a prefix.
    pub fn absorb(&mut self, other: &ParamStore<F>) {
        for (name, t) in other.iter() {
            self.params.insert(name.clone(), t.detached());
        }
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.bits_eq(bt))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Sum of |a - b| over all parameters; stores must share names.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        let mut total = 0.0;
        for (name, t) in self.iter() {
            if let Some(o) = other.get(name) {
                for (a, b) in t.data().iter().zip(o.data()) {
                    total += (a.as_f64() - b.as_f64()).abs();
                }
            }
        }
        total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    SoftmaxLast,
}

/// Fully-connected network: ReLU hidden layers, configurable output head.
/// Parameters live in a `ParamStore` under `{prefix}.w{i}` / `{prefix}.b{i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
    output: Activation,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>, output: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        Self {
            prefix: prefix.into(),
            dims,
            output,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{}", self.prefix, layer)
    }

    fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{}", self.prefix, layer)
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layer_count())
            .flat_map(|l| [self.weight_name(l), self.bias_name(l)])
            .collect()
    }

    /// Seeded uniform init scaled by fan-in. Biases start small but nonzero
    /// so no ReLU pre-activation sits exactly on its kink at initialization.
    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut StdRng) {
        for l in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            let w: Vec<F> = (0..fan_in * fan_out)
                .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            store.insert(
                self.weight_name(l),
                TensorBase::from_vec(vec![fan_in, fan_out], w).expect("weight shape"),
            );
            let b: Vec<F> = (0..fan_out)
                .map(|_| F::from_f64(rng.gen_range(-0.05..0.05)))
                .collect();
            store.insert(
                self.bias_name(l),
                TensorBase::from_vec(vec![fan_out], b).expect("bias shape"),
            );
        }
    }

    /// Forward pass for a `[batch, input_dim]` tensor.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: &TensorBase<F>,
    ) -> Result<TensorBase<F>, TensorError> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "mlp-forward",
                detail: format!(
                    "{} expects [batch, {}], got {:?}",
                    self.prefix,
                    self.input_dim(),
                    x.shape()
                ),
            });
        }
        let mut h = x.clone();
        for l in 0..self.layer_count() {
            let w = g.param(&self.weight_name(l), store.require(&self.weight_name(l))?)?;
            let b = g.param(&self.bias_name(l), store.require(&self.bias_name(l))?)?;
            h = g.matmul(&h, &w)?;
            h = g.add(&h, &b)?;
            let last = l + 1 == self.layer_count();
            h = match (last, self.output) {
                (false, _) => g.relu(&h)?,
                (true, Activation::Linear) => h,
                (true, Activation::Relu) => g.relu(&h)?,
                (true, Activation::Sigmoid) => g.sigmoid(&h)?,
                (true, Activation::SoftmaxLast) => g.softmax_last(&h)?,
            };
        }
        Ok(h)
    }

    /// Reconstruct layer dims from tensors already present in a store,
    /// e.g. after loading a checkpoint.
    pub fn from_store<F: Scalar>(
        prefix: &str,
        store: &ParamStore<F>,
        output: Activation,
    ) -> Result<Self, TensorError> {
        let mut dims: Vec<usize> = Vec::new();
        let mut layer = 0;
        loop {
            let name = format!("{prefix}.w{layer}");
            match store.get(&name) {
                Some(w) => {
                    if dims.is_empty() {
                        dims.push(w.shape()[0]);
                    }
                    dims.push(w.shape()[1]);
                    layer += 1;
                }
                None => break,
            }
        }
        if dims.len() < 2 {
            return Err(TensorError::UnknownParam {
                name: format!("{prefix}.w0"),
            });
        }
        Ok(Self::new(prefix, dims, output))
    }
}
