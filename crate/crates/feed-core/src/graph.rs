//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A `Graph` records one forward pass; `backward` consumes it and returns
//! gradients for every registered parameter. Graphs are cheap to build and
//! are freed after the backward pass.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Scalar;
use crate::tensor::{NodeRef, TensorBase, TensorError};

/// Inputs to `log` are clamped to at least this value.
pub const LOG_FLOOR: f64 = 1e-12;
/// Sigmoid and softmax outputs are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Operation kinds accepted by the dynamic `forward` dispatcher.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    Matmul,
    Add,
    Sub,
    ElementwiseMul,
    ScalarMul(f64),
    Relu,
    Sigmoid,
    SoftmaxLastAxis,
    Log,
    Exp,
    Abs,
    Mean,
    Sum,
    L1Norm,
    ConcatLastAxis,
    Slice(usize, usize),
}

#[derive(Clone, Debug)]
enum Op<F: Scalar> {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize, row_broadcast: bool },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    ScalarMul { a: usize, factor: F },
    Relu { a: usize },
    Sigmoid { a: usize },
    SoftmaxLast { a: usize },
    Log { a: usize },
    Exp { a: usize },
    Abs { a: usize },
    Mean { a: usize },
    Sum { a: usize },
    L1Norm { a: usize },
    ConcatLast { a: usize, b: usize, left_width: usize },
    SliceLast { a: usize, start: usize, end: usize },
}

#[derive(Clone, Debug)]
struct Node<F: Scalar> {
    op: Op<F>,
    shape: Vec<usize>,
    data: Vec<F>,
}

/// Gradients keyed by parameter name; shapes match the parameters.
#[derive(Clone, Debug, Default)]
pub struct GradientMap<F: Scalar> {
    grads: BTreeMap<String, TensorBase<F>>,
}

impl<F: Scalar> GradientMap<F> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorBase<F>> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: String, grad: TensorBase<F>) {
        self.grads.insert(name, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorBase<F>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise `self += scale * other`, used to fold per-task gradients.
    pub fn accumulate_scaled(&mut self, other: &GradientMap<F>, scale: F) {
        for (name, grad) in other.iter() {
            match self.grads.get_mut(name) {
                Some(existing) => {
                    let dst = existing.data_mut();
                    for (d, s) in dst.iter_mut().zip(grad.data()) {
                        *d = *d + scale * *s;
                    }
                }
                None => {
                    let mut scaled = grad.detached();
                    for v in scaled.data_mut() {
                        *v = scale * *v;
                    }
                    self.grads.insert(name.clone(), scaled);
                }
            }
        }
    }
}

/// One forward pass worth of computation, ready for a single backward call.
pub struct Graph<F: Scalar> {
    id: u64,
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, usize>,
    consumed: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
            consumed: false,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(
        &mut self,
        op: Op<F>,
        shape: Vec<usize>,
        data: Vec<F>,
        name: &'static str,
    ) -> Result<TensorBase<F>, TensorError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            data: data.clone(),
        });
        Ok(TensorBase::with_node(
            shape,
            data,
            NodeRef {
                graph: self.id,
                index,
            },
        ))
    }

    fn check_live(&self, op: &'static str) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let _ = op;
        Ok(())
    }

    /// Node index for a tensor: existing node if it belongs to this graph,
    /// otherwise a fresh constant leaf.
    fn lift(&mut self, t: &TensorBase<F>, op: &'static str) -> Result<usize, TensorError> {
        match t.node {
            Some(nr) if nr.graph == self.id => Ok(nr.index),
            Some(_) => Err(TensorError::ForeignTensor { op }),
            None => {
                if !t.is_finite() {
                    return Err(TensorError::NonFinite { op });
                }
                let index = self.nodes.len();
                self.nodes.push(Node {
                    op: Op::Leaf,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                });
                Ok(index)
            }
        }
    }

    /// Register a trainable parameter. Repeated registrations under the same
    /// name share one leaf so gradients accumulate across uses.
    pub fn param(
        &mut self,
        name: &str,
        value: &TensorBase<F>,
    ) -> Result<TensorBase<F>, TensorError> {
        self.check_live("param")?;
        if let Some(&index) = self.params.get(name) {
            if self.nodes[index].shape != value.shape() {
                return Err(TensorError::ParamShapeConflict {
                    name: name.to_string(),
                });
            }
            return Ok(TensorBase::with_node(
                self.nodes[index].shape.clone(),
                self.nodes[index].data.clone(),
                NodeRef {
                    graph: self.id,
                    index,
                },
            ));
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "param" });
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: value.shape().to_vec(),
            data: value.data().to_vec(),
        });
        self.params.insert(name.to_string(), index);
        Ok(TensorBase::with_node(
            value.shape().to_vec(),
            value.data().to_vec(),
            NodeRef {
                graph: self.id,
                index,
            },
        ))
    }

    /// Record an untracked constant.
    pub fn constant(&mut self, value: &TensorBase<F>) -> Result<TensorBase<F>, TensorError> {
        self.check_live("constant")?;
        let index = self.lift(value, "constant")?;
        Ok(TensorBase::with_node(
            value.shape().to_vec(),
            value.data().to_vec(),
            NodeRef {
                graph: self.id,
                index,
            },
        ))
    }

    /// Dynamic dispatcher over the supported op kinds.
    pub fn forward(
        &mut self,
        kind: OpKind,
        inputs: &[&TensorBase<F>],
    ) -> Result<TensorBase<F>, TensorError> {
        let want = |n: usize| -> Result<(), TensorError> {
            if inputs.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "forward",
                    detail: format!("expected {} inputs, got {}", n, inputs.len()),
                });
            }
            Ok(())
        };
        match kind {
            OpKind::Matmul => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                want(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                want(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::ElementwiseMul => {
                want(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::ScalarMul(s) => {
                want(1)?;
                self.scalar_mul(inputs[0], F::from_f64(s))
            }
            OpKind::Relu => {
                want(1)?;
                self.relu(inputs[0])
            }
            OpKind::Sigmoid => {
                want(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::SoftmaxLastAxis => {
                want(1)?;
                self.softmax_last(inputs[0])
            }
            OpKind::Log => {
                want(1)?;
                self.log(inputs[0])
            }
            OpKind::Exp => {
                want(1)?;
                self.exp(inputs[0])
            }
            OpKind::Abs => {
                want(1)?;
                self.abs(inputs[0])
            }
            OpKind::Mean => {
                want(1)?;
                self.mean(inputs[0])
            }
            OpKind::Sum => {
                want(1)?;
                self.sum(inputs[0])
            }
            OpKind::L1Norm => {
                want(1)?;
                self.l1_norm(inputs[0])
            }
            OpKind::ConcatLastAxis => {
                want(2)?;
                self.concat_last(inputs[0], inputs[1])
            }
            OpKind::Slice(start, end) => {
                want(1)?;
                self.slice_last(inputs[0], start, end)
            }
        }
    }

    pub fn matmul(
        &mut self,
        a: &TensorBase<F>,
        b: &TensorBase<F>,
    ) -> Result<TensorBase<F>, TensorError> {
        self.check_live("matmul")?;
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", a.shape(), b.shape()),
            });
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let ai = self.lift(a, "matmul")?;
        let bi = self.lift(b, "matmul")?;
        let ad = &self.nodes[ai].data;
        let bd = &self.nodes[bi].data;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == F::zero() {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] = out[i * n + j] + av * bd[p * n + j];
                }
            }
        }
        self.push(Op::Matmul { a: ai, b: bi }, vec![m, n], out, "matmul")
    }

    /// Elementwise addition; also accepts `[m, n] + [n]` row broadcast.
    pub fn add(
        &mut self,
        a: &TensorBase<F>,
        b: &TensorBase<F>,
    ) -> Result<TensorBase<F>, TensorError> {
        self.check_live("add")?;
        let row_broadcast = a.shape().len() == 2
            && b.shape().len() == 1
            && a.shape()[1] == b.shape()[0];
        if !row_broadcast && a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} + {:?}", a.shape(), b.shape()),
            });
        }
        let ai = self.lift(a, "add")?;
        let bi = self.lift(b, "add")?;
        let ad = &self.nodes[ai].data;
        let bd = &self.nodes[bi].data;
        let out: Vec<F> = if row_broadcast {
            let n = b.shape()[0];
            ad.iter()
                .enumerate()
                .map(|(i, v)| *v + bd[i % n])
                .collect()
        } else {
            ad.iter().zip(bd.iter()).map(|(x, y)| *x + *y).collect()
        };
        self.push(
            Op::Add {
                a: ai,
                b: bi,
                row_broadcast,
            },
            a.shape().to_vec(),
            out,
            "add",
        )
    }

    pub fn sub(
        &mut self,
        a: &TensorBase<F>,
        b: &TensorBase<F>,
    ) -> Result<TensorBase<F>, TensorError> {
        self.check_live("sub")?;
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                detail: format!("{:?} - {:?}", a.shape(), b.shape()),
            });
        }
        let ai = self.lift(a, "sub")?;
        let bi = self.lift(b, "sub")?;
        let out: Vec<F> = self.nodes[ai]
            .data
            .iter()
            .zip(self.nodes[bi].data.iter())
            .map(|(x, y)| *x - *y)
            .collect();
        self.push(Op::Sub { a: ai, b: bi }, a.shape().to_vec(), out, "sub")
    }

    pub fn mul(
        &mut self,
        a: &TensorBase<F>,
        b: &TensorBase<F>,
    ) -> Result<TensorBase<F>, TensorError> {
        self.check_live("mul")?;
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise-mul",
                detail: format!("{:?} * {:?}", a.shape(), b.shape()),
            });
        }
        let ai = self.lift(a, "elementwise-mul")?;
        let bi = self.lift(b, "elementwise-mul")?;
        let out: Vec<F> = self.nodes[ai]
            .data
            .iter()
            .zip(self.nodes[bi].data.iter())
            .map(|(x, y)| *x * *y)
            .collect();
        self.push(
            Op::Mul { a: ai, b: bi },
            a.shape().to_vec(),
            out,
            "elementwise-mul",
        )
    }

    pub fn scalar_mul(
        &mut self,
        a: &TensorBase<F>,
        factor: F,
    ) -> Result<TensorBase<F>, TensorError> {
        self.check_live("scalar-mul")?;
        let ai = self.lift(a, "scalar-mul")?;
        let out: Vec<F> = self.nodes[ai].data.iter().map(|x| *x * factor).collect();
        self.push(
            Op::ScalarMul { a: ai, factor },
            a.shape().to_vec(),
            out,
            "scalar-mul",
        )
    }

    pub fn relu(&mut self, a: &TensorBase<F>) -> Result<TensorBase<F>, TensorError> {
        self.check_live("relu")?;
        let ai = self.lift(a, "relu")?;
        let out: Vec<F> = self.nodes[ai]
            .data
            .iter()
            .map(|x| if *x > F::zero() { *x } else { F::zero() })
            .collect();
        self.push(Op::Relu { a: ai }, a.shape().to_vec(), out, "relu")
    }

    pub fn sigmoid(&mut self, a: &TensorBase<F>) -> Result<TensorBase<F>, TensorError> {
        self.check_live("sigmoid")?;
        let ai = self.lift(a, "sigmoid")?;
        let lo = F::from_f64(PROB_CLAMP);
        let hi = F::one() - lo;
        let out: Vec<F> = self.nodes[ai]
            .data
            .iter()
            .map(|x| {
                let s = if *x >= F::zero() {
                    F::one() / (F::one() + (-*x).exp())
                } else {
                    let e = x.exp();
                    e / (F::one() + e)
                };
                s.max(lo).min(hi)
            })
            .collect();
        self.push(Op::Sigmoid { a: ai }, a.shape().to_vec(), out, "sigmoid")
    }

    /// Row-wise softmax over the last axis, outputs clamped away from {0, 1}.
    pub fn softmax_last(&mut self, a: &TensorBase<F>) -> Result<TensorBase<F>, TensorError> {
        self.check_live("softmax-last-axis")?;
        let width = a.last_dim();
        if width == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax-last-axis",
                detail: format!("{:?}", a.shape()),
            });
        }
        let ai = self.lift(a, "softmax-last-axis")?;
        let lo = F::from_f64(PROB_CLAMP);
        let hi = F::one() - lo;
        let data = &self.nodes[ai].data;
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks(width) {
            let mx = row.iter().fold(F::neg_infinity(), |acc, v| acc.max(*v));
            let exps: Vec<F> = row.iter().map(|v| (*v - mx).exp()).collect();
            let total = exps.iter().fold(F::zero(), |acc, v| acc + *v);
            for e in exps {
                out.push((e / total).max(lo).min(hi));
            }
        }
        self.push(
            Op::SoftmaxLast { a: ai },
            a.shape().to_vec(),
            out,
            "softmax-last-axis",
        )
    }

    /// Natural log with inputs clamped to at least `LOG_FLOOR`.
    pub fn log(&mut self, a: &TensorBase<F>) -> Result<TensorBase<F>, TensorError> {
        self.check_live("log")?;
        let ai = self.lift(a, "log")?;
        let floor = F::from_f64(LOG_FLOOR);
        let out: Vec<F> = self.nodes[ai]
            .data
            .iter()
            .map(|x| x.max(floor).ln())
            .collect();
        self.push(Op::Log { a: ai }, a.shape().to_vec(), out, "log")
    }

    pub fn exp(&mut self, a: &TensorBase<F>) -> Result<TensorBase<F>, TensorError> {
        self.check_live("exp")?;
        let ai = self.lift(a, "exp")?;
        let out: Vec<F> = self.nodes[ai].data.iter().map(|x| x.exp()).collect();
        self.push(Op::Exp { a: ai }, a.shape().to_vec(), out, "exp")
    }

    pub fn abs(&mut self, a: &TensorBase<F>) -> Result<TensorBase<F>, TensorError> {
        self.check_live("abs")?;
        let ai = self.lift(a, "abs")?;
        let out: Vec<F> = self.nodes[ai].data.iter().map(|x| x.abs()).collect();
        self.push(Op::Abs { a: ai }, a.shape().to_vec(), out, "abs")
    }

    pub fn mean(&mut self, a: &TensorBase<F>) -> Result<TensorBase<F>, TensorError> {
        self.check_live("mean")?;
        if a.numel() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let ai = self.lift(a, "mean")?;
        let total = self.nodes[ai]
            .data
            .iter()
            .fold(F::zero(), |acc, v| acc + *v);
        let n = F::from_f64(a.numel() as f64);
        self.push(Op::Mean { a: ai }, vec![], vec![total / n], "mean")
    }

    pub fn sum(&mut self, a: &TensorBase<F>) -> Result<TensorBase<F>, TensorError> {
        self.check_live("sum")?;
        let ai = self.lift(a, "sum")?;
        let total = self.nodes[ai]
            .data
            .iter()
            .fold(F::zero(), |acc, v| acc + *v);
        self.push(Op::Sum { a: ai }, vec![], vec![total], "sum")
    }

    /// Sum of absolute values over all elements.
    pub fn l1_norm(&mut self, a: &TensorBase<F>) -> Result<TensorBase<F>, TensorError> {
        self.check_live("l1-norm")?;
        let ai = self.lift(a, "l1-norm")?;
        let total = self.nodes[ai]
            .data
            .iter()
            .fold(F::zero(), |acc, v| acc + v.abs());
        self.push(Op::L1Norm { a: ai }, vec![], vec![total], "l1-norm")
    }

    pub fn concat_last(
        &mut self,
        a: &TensorBase<F>,
        b: &TensorBase<F>,
    ) -> Result<TensorBase<F>, TensorError> {
        self.check_live("concat-last-axis")?;
        let ok = match (a.shape().len(), b.shape().len()) {
            (1, 1) => true,
            (2, 2) => a.shape()[0] == b.shape()[0],
            _ => false,
        };
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "concat-last-axis",
                detail: format!("{:?} ++ {:?}", a.shape(), b.shape()),
            });
        }
        let left_width = a.last_dim();
        let right_width = b.last_dim();
        let rows = a.rows();
        let ai = self.lift(a, "concat-last-axis")?;
        let bi = self.lift(b, "concat-last-axis")?;
        let mut out = Vec::with_capacity(a.numel() + b.numel());
        for r in 0..rows {
            out.extend_from_slice(
                &self.nodes[ai].data[r * left_width..(r + 1) * left_width],
            );
            out.extend_from_slice(
                &self.nodes[bi].data[r * right_width..(r + 1) * right_width],
            );
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = left_width + right_width;
        self.push(
            Op::ConcatLast {
                a: ai,
                b: bi,
                left_width,
            },
            shape,
            out,
            "concat-last-axis",
        )
    }

    /// Columns `[start, end)` along the last axis.
    pub fn slice_last(
        &mut self,
        a: &TensorBase<F>,
        start: usize,
        end: usize,
    ) -> Result<TensorBase<F>, TensorError> {
        self.check_live("slice")?;
        let width = a.last_dim();
        if start >= end || end > width || a.shape().is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                detail: format!("[{start}, {end}) of last dim {width}"),
            });
        }
        let rows = a.rows();
        let ai = self.lift(a, "slice")?;
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&self.nodes[ai].data[r * width + start..r * width + end]);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        self.push(
            Op::SliceLast {
                a: ai,
                start,
                end,
            },
            shape,
            out,
            "slice",
        )
    }

    /// Gradients of a scalar loss with respect to every registered parameter.
    /// Parameters the loss does not reach get zero gradients. Consumes the
    /// graph; a second call fails with `GraphConsumed`.
    pub fn backward(&mut self, loss: &TensorBase<F>) -> Result<GradientMap<F>, TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if !loss.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: loss.shape().to_vec(),
            });
        }
        let loss_index = match loss.node {
            Some(nr) if nr.graph == self.id => Some(nr.index),
            Some(_) => return Err(TensorError::ForeignTensor { op: "backward" }),
            // A constant loss does not depend on any parameter.
            None => None,
        };

        let mut adjoints: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        if let Some(li) = loss_index {
            adjoints[li] = Some(vec![F::one()]);
            for i in (0..=li).rev() {
                let grad = match adjoints[i].take() {
                    Some(g) => g,
                    None => continue,
                };
                self.propagate(i, &grad, &mut adjoints);
                adjoints[i] = Some(grad);
            }
        }

        let mut grads = GradientMap::new();
        for (name, &index) in &self.params {
            let node = &self.nodes[index];
            let data = match &adjoints[index] {
                Some(g) => g.clone(),
                None => vec![F::zero(); node.data.len()],
            };
            grads.insert(
                name.clone(),
                TensorBase::from_vec(node.shape.clone(), data).expect("gradient shape"),
            );
        }
        self.consumed = true;
        self.nodes.clear();
        Ok(grads)
    }

    fn propagate(&self, index: usize, grad: &[F], adjoints: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[index];
        let acc = |adjoints: &mut [Option<Vec<F>>], target: usize, f: &mut dyn FnMut(&mut Vec<F>)| {
            let slot = adjoints[target]
                .get_or_insert_with(|| vec![F::zero(); self.nodes[target].data.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let ad = self.nodes[*a].data.clone();
                let bd = self.nodes[*b].data.clone();
                // dA = dC * B^T, dB = A^T * dC, both with contiguous inner loops.
                acc(adjoints, *a, &mut |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = F::zero();
                            for j in 0..n {
                                s = s + grad[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = da[i * k + p] + s;
                        }
                    }
                });
                acc(adjoints, *b, &mut |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == F::zero() {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] = db[p * n + j] + av * grad[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add {
                a,
                b,
                row_broadcast,
            } => {
                acc(adjoints, *a, &mut |da| {
                    for (d, g) in da.iter_mut().zip(grad) {
                        *d = *d + *g;
                    }
                });
                if *row_broadcast {
                    let n = self.nodes[*b].data.len();
                    acc(adjoints, *b, &mut |db| {
                        for (i, g) in grad.iter().enumerate() {
                            db[i % n] = db[i % n] + *g;
                        }
                    });
                } else {
                    acc(adjoints, *b, &mut |db| {
                        for (d, g) in db.iter_mut().zip(grad) {
                            *d = *d + *g;
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                acc(adjoints, *a, &mut |da| {
                    for (d, g) in da.iter_mut().zip(grad) {
                        *d = *d + *g;
                    }
                });
                acc(adjoints, *b, &mut |db| {
                    for (d, g) in db.iter_mut().zip(grad) {
                        *d = *d - *g;
                    }
                });
            }
            Op::Mul { a, b } => {
                let ad = self.nodes[*a].data.clone();
                let bd = self.nodes[*b].data.clone();
                acc(adjoints, *a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] = da[i] + grad[i] * bd[i];
                    }
                });
                acc(adjoints, *b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] = db[i] + grad[i] * ad[i];
                    }
                });
            }
            Op::ScalarMul { a, factor } => {
                let f = *factor;
                acc(adjoints, *a, &mut |da| {
                    for (d, g) in da.iter_mut().zip(grad) {
                        *d = *d + *g * f;
                    }
                });
            }
            Op::Relu { a } => {
                let input = self.nodes[*a].data.clone();
                acc(adjoints, *a, &mut |da| {
                    for i in 0..da.len() {
                        if input[i] > F::zero() {
                            da[i] = da[i] + grad[i];
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = node.data.clone();
                acc(adjoints, *a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] = da[i] + grad[i] * y[i] * (F::one() - y[i]);
                    }
                });
            }
            Op::SoftmaxLast { a } => {
                let width = *node.shape.last().unwrap();
                let y = node.data.clone();
                acc(adjoints, *a, &mut |da| {
                    for r in 0..y.len() / width {
                        let ys = &y[r * width..(r + 1) * width];
                        let gs = &grad[r * width..(r + 1) * width];
                        let dot = ys
                            .iter()
                            .zip(gs)
                            .fold(F::zero(), |acc, (yv, gv)| acc + *yv * *gv);
                        for j in 0..width {
                            da[r * width + j] =
                                da[r * width + j] + ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::Log { a } => {
                let input = self.nodes[*a].data.clone();
                let floor = F::from_f64(LOG_FLOOR);
                acc(adjoints, *a, &mut |da| {
                    for i in 0..da.len() {
                        // The clamped region is flat.
                        if input[i] > floor {
                            da[i] = da[i] + grad[i] / input[i];
                        }
                    }
                });
            }
            Op::Exp { a } => {
                let y = node.data.clone();
                acc(adjoints, *a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] = da[i] + grad[i] * y[i];
                    }
                });
            }
            Op::Abs { a } => {
                let input = self.nodes[*a].data.clone();
                acc(adjoints, *a, &mut |da| {
                    for i in 0..da.len() {
                        // Subgradient at zero is zero.
                        if input[i] > F::zero() {
                            da[i] = da[i] + grad[i];
                        } else if input[i] < F::zero() {
                            da[i] = da[i] - grad[i];
                        }
                    }
                });
            }
            Op::Mean { a } => {
                let n = F::from_f64(self.nodes[*a].data.len() as f64);
                let g = grad[0] / n;
                acc(adjoints, *a, &mut |da| {
                    for d in da.iter_mut() {
                        *d = *d + g;
                    }
                });
            }
            Op::Sum { a } => {
                let g = grad[0];
                acc(adjoints, *a, &mut |da| {
                    for d in da.iter_mut() {
                        *d = *d + g;
                    }
                });
            }
            Op::L1Norm { a } => {
                let input = self.nodes[*a].data.clone();
                let g = grad[0];
                acc(adjoints, *a, &mut |da| {
                    for i in 0..da.len() {
                        if input[i] > F::zero() {
                            da[i] = da[i] + g;
                        } else if input[i] < F::zero() {
                            da[i] = da[i] - g;
                        }
                    }
                });
            }
            Op::ConcatLast { a, b, left_width } => {
                let lw = *left_width;
                let rw = self.nodes[*b].shape.last().copied().unwrap_or(1);
                let width = lw + rw;
                let rows = grad.len() / width;
                acc(adjoints, *a, &mut |da| {
                    for r in 0..rows {
                        for j in 0..lw {
                            da[r * lw + j] = da[r * lw + j] + grad[r * width + j];
                        }
                    }
                });
                acc(adjoints, *b, &mut |db| {
                    for r in 0..rows {
                        for j in 0..rw {
                            db[r * rw + j] = db[r * rw + j] + grad[r * width + lw + j];
                        }
                    }
                });
            }
            Op::SliceLast { a, start, end } => {
                let src_width = *self.nodes[*a].shape.last().unwrap();
                let out_width = end - start;
                let rows = grad.len() / out_width;
                let s = *start;
                acc(adjoints, *a, &mut |da| {
                    for r in 0..rows {
                        for j in 0..out_width {
                            da[r * src_width + s + j] =
                                da[r * src_width + s + j] + grad[r * out_width + j];
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = TensorBase<f64>;

    #[test]
    fn matmul_identity_passes_through() {
        let mut g = Graph::<f64>::new();
        let eye = T::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = T::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let out = g.matmul(&eye, &a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f64>::new();
        let x = T::row(vec![-1.0, 0.0, 2.0]);
        let y = g.relu(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::<f64>::new();
        let x = T::row(vec![0.0, 0.0]);
        let y = g.softmax_last(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::<f64>::new();
        let theta = T::row(vec![1.0, -2.0]);
        let p = g.param("theta", &theta).unwrap();
        let sq = g.mul(&p, &p).unwrap();
        let loss = g.sum(&sq).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get("theta").unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let theta = T::row(vec![3.0]);
        let _p = g.param("theta", &theta).unwrap();
        let c = g.constant(&T::scalar(5.0)).unwrap();
        let loss = g.sum(&c).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get("theta").unwrap().data(), &[0.0]);
    }

    #[test]
    fn second_backward_fails() {
        let mut g = Graph::<f64>::new();
        let theta = T::row(vec![1.0]);
        let p = g.param("theta", &theta).unwrap();
        let loss = g.sum(&p).unwrap();
        g.backward(&loss).unwrap();
        assert!(matches!(
            g.backward(&loss),
            Err(TensorError::GraphConsumed)
        ));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let theta = T::row(vec![1.0, 2.0]);
        let p = g.param("theta", &theta).unwrap();
        assert!(matches!(
            g.backward(&p),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn shared_parameter_accumulates() {
        // loss = sum(p) + sum(p) => grad = 2 per element
        let mut g = Graph::<f64>::new();
        let theta = T::row(vec![1.0, 1.0]);
        let p1 = g.param("theta", &theta).unwrap();
        let p2 = g.param("theta", &theta).unwrap();
        let s = g.add(&p1, &p2).unwrap();
        let loss = g.sum(&s).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get("theta").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradient() {
        let mut g = Graph::<f64>::new();
        let a = T::row(vec![1.0, 2.0]);
        let b = T::row(vec![3.0]);
        let pa = g.param("a", &a).unwrap();
        let pb = g.param("b", &b).unwrap();
        let cat = g.concat_last(&pa, &pb).unwrap();
        assert_eq!(cat.data(), &[1.0, 2.0, 3.0]);
        let right = g.slice_last(&cat, 1, 3).unwrap();
        assert_eq!(right.data(), &[2.0, 3.0]);
        let loss = g.sum(&right).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[0.0, 1.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = T::row(vec![1e308]);
        assert!(matches!(
            g.add(&x, &x), // overflows to infinity
            Err(TensorError::NonFinite { op: "add" })
        ));
    }

    #[test]
    fn foreign_tensor_rejected() {
        let mut g1 = Graph::<f64>::new();
        let mut g2 = Graph::<f64>::new();
        let x = T::row(vec![1.0]);
        let p = g1.param("x", &x).unwrap();
        assert!(matches!(
            g2.relu(&p),
            Err(TensorError::ForeignTensor { .. })
        ));
    }
}
