//! Domain transformation: mint a synthetic-domain counterpart of an example
//! by keeping its content factor and resampling style and sensitive factors.

use rand::rngs::StdRng;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{DataError, Example};
use crate::disentangle::{transform_nodes, DisentangleModel, Stage1Error};
use crate::graph::Graph;
use crate::tensor::TensorBase;

type Tensor = TensorBase<f64>;

/// An example together with its transformed counterpart. The class label is
/// preserved by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub original: Example,
    pub augmented: Example,
}

impl AugmentedPair {
    pub fn new(original: Example, augmented: Example) -> Self {
        debug_assert_eq!(original.y, augmented.y, "transform must preserve labels");
        Self {
            original,
            augmented,
        }
    }
}

fn sample_row(rng: &mut StdRng, n: usize) -> Tensor {
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::row(data)
}

/// Produce `(x', z', y)`: content re-encoded from `x`, fresh style and
/// sensitive factors, the new sensitive label read off the classifier, and
/// the class label copied verbatim.
pub fn transform_example(
    model: &DisentangleModel,
    example: &Example,
    rng: &mut StdRng,
) -> Result<Example, Stage1Error> {
    if example.x.len() != model.dims.feature {
        return Err(Stage1Error::Data(DataError::DimensionMismatch {
            expected: model.dims.feature,
            got: example.x.len(),
        }));
    }
    let sensitive_new = sample_row(rng, model.dims.sensitive);
    let style_new = sample_row(rng, model.dims.style);

    let mut g = Graph::new();
    let x = Tensor::row(example.x.clone());
    let (x_new, _content) = transform_nodes(&mut g, model, &x, &sensitive_new, &style_new)?;
    let (z_new, _) = crate::disentangle::predict_sensitive(model, sensitive_new.data())?;

    let mut out = Example::new(x_new.data().to_vec(), z_new, example.y);
    out.eval_only = example.eval_only;
    Ok(out)
}

/// Wrap an example with its transform.
pub fn transform_pair(
    model: &DisentangleModel,
    example: &Example,
    rng: &mut StdRng,
) -> Result<AugmentedPair, Stage1Error> {
    let augmented = transform_example(model, example, rng)?;
    Ok(AugmentedPair::new(example.clone(), augmented))
}

/// Transform every element, preserving length and order. Consumes the rng
/// stream one example at a time, so per-example calls replay identically;
/// the forward passes run batched, which is bitwise equivalent because every
/// op treats rows independently.
pub fn augment_batch(
    model: &DisentangleModel,
    batch: &[Example],
    rng: &mut StdRng,
) -> Result<Vec<Example>, Stage1Error> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let dims = model.dims;
    let mut sensitive_rows = Vec::with_capacity(batch.len() * dims.sensitive);
    let mut style_rows = Vec::with_capacity(batch.len() * dims.style);
    for ex in batch {
        if ex.x.len() != dims.feature {
            return Err(Stage1Error::Data(DataError::DimensionMismatch {
                expected: dims.feature,
                got: ex.x.len(),
            }));
        }
        // Per-example draw order matches transform_example.
        for _ in 0..dims.sensitive {
            sensitive_rows.push(rng.sample(StandardNormal));
        }
        for _ in 0..dims.style {
            style_rows.push(rng.sample(StandardNormal));
        }
    }
    let sensitive_new =
        Tensor::from_vec(vec![batch.len(), dims.sensitive], sensitive_rows).expect("prior shape");
    let style_new =
        Tensor::from_vec(vec![batch.len(), dims.style], style_rows).expect("prior shape");

    let mut g = Graph::new();
    let x = crate::batches::features_tensor(batch)?;
    let (x_new, _) = transform_nodes(&mut g, model, &x, &sensitive_new, &style_new)?;
    let z_probs = model
        .sensitive_clf
        .forward(&mut g, &model.model_params, &sensitive_new)?;

    let mut out = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let row = z_probs.row_slice(i);
        let z_new: i8 = if row[1] >= row[0] { 1 } else { -1 };
        let mut t = Example::new(x_new.row_slice(i).to_vec(), z_new, ex.y);
        t.eval_only = ex.eval_only;
        out.push(t);
    }
    Ok(out)
}
