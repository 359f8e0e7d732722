//! Fairness-enhanced meta-learning for domain generalization on tabular data.
//!
//! The crate has three layers:
//!
//! * a scalar-generic tensor core (`scalar`, `tensor`, `graph`, `optim`,
//!   `nn`) providing reverse-mode autodiff, SGD/Adam, and fully-connected
//!   networks over any `Scalar` (`f32`/`f64`);
//! * the learning pipeline (`data`, `disentangle`, `transform`, `meta`,
//!   `fairmetrics`), pinned to 64-bit floats through the aliases below;
//! * the experiment harness (`config`, `checkpoint`, `lodo`) driving
//!   leave-one-domain-out runs and bit-exact persistence.

pub mod scalar;
pub mod tensor;
pub mod graph;
pub mod optim;
pub mod nn;
mod batches;
pub mod data;
pub mod disentangle;
pub mod transform;
pub mod meta;
pub mod fairmetrics;
pub mod checkpoint;
pub mod config;
pub mod lodo;

pub use scalar::Scalar;

/// Concrete 64-bit aliases used throughout the pipeline.
pub type Tensor = tensor::TensorBase<f64>;
pub type Graph = graph::Graph<f64>;
pub type GradientMap = graph::GradientMap<f64>;
pub type ParamStore = nn::ParamStore<f64>;
pub type Optimizer = optim::Optimizer<f64>;

/// 32-bit variants for callers that opt into single precision.
pub type Tensor32 = tensor::TensorBase<f32>;
pub type Graph32 = graph::Graph<f32>;
