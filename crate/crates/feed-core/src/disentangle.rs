//! Stage-1 disentanglement: a two-level encoder/decoder stack that factors an
//! example into semantic, content, style, and sensitive latents, trained with
//! reconstruction, sensitive-prediction, and adversarial losses.

use rand::rngs::StdRng;
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batches::{cross_entropy_node, features_tensor, sensitive_classes};
use crate::data::{derive_seed, DataError, DomainDataset, Example};
use crate::graph::Graph;
use crate::nn::{Activation, Mlp, ParamStore};
use crate::optim::Optimizer;
use crate::tensor::{TensorBase, TensorError};

type Tensor = TensorBase<f64>;

#[derive(Debug, Error)]
pub enum Stage1Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("training received an evaluation-split example from domain `{domain}`")]
    EvalLeak { domain: String },
    #[error("loss diverged at step {step}; last good step was {last_good:?}")]
    Diverged {
        step: usize,
        last_good: Option<usize>,
    },
}

/// Latent sizes of the disentangler. `feature` is the input dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDims {
    pub feature: usize,
    pub semantic: usize,
    pub content: usize,
    pub style: usize,
    pub sensitive: usize,
}

impl LatentDims {
    pub fn to_vec(self) -> Vec<usize> {
        vec![
            self.feature,
            self.semantic,
            self.content,
            self.style,
            self.sensitive,
        ]
    }

    pub fn from_slice(v: &[usize]) -> Option<Self> {
        if v.len() != 5 {
            return None;
        }
        Some(Self {
            feature: v[0],
            semantic: v[1],
            content: v[2],
            style: v[3],
            sensitive: v[4],
        })
    }
}

/// Hidden-layer widths for the fully-connected stage-1 networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Arch {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub sensitive_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
}

impl Default for Stage1Arch {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            sensitive_hidden: vec![16],
            disc_hidden: vec![64],
        }
    }
}

/// The four latent factors of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle {
    pub semantic: Vec<f64>,
    pub content: Vec<f64>,
    pub style: Vec<f64>,
    pub sensitive: Vec<f64>,
}

/// Parameter stores for the encoders, decoders, sensitive classifier, and
/// both discriminators, plus the latent dimensions.
#[derive(Clone, Debug)]
pub struct DisentangleModel {
    pub dims: LatentDims,
    pub(crate) enc_semantic: Mlp,
    pub(crate) enc_style: Mlp,
    pub(crate) enc_content: Mlp,
    pub(crate) enc_sensitive: Mlp,
    pub(crate) dec_inner: Mlp,
    pub(crate) dec_outer: Mlp,
    pub(crate) sensitive_clf: Mlp,
    pub(crate) disc_inner: Mlp,
    pub(crate) disc_outer: Mlp,
    /// Encoders, decoders, and the sensitive classifier.
    pub model_params: ParamStore<f64>,
    /// Both discriminators.
    pub disc_params: ParamStore<f64>,
}

fn mlp_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

impl DisentangleModel {
    pub fn new(dims: LatentDims, arch: &Stage1Arch, seed: u64) -> Self {
        let enc_semantic = Mlp::new(
            "enc_semantic",
            mlp_dims(dims.feature, &arch.encoder_hidden, dims.semantic),
            Activation::Linear,
        );
        let enc_style = Mlp::new(
            "enc_style",
            mlp_dims(dims.feature, &arch.encoder_hidden, dims.style),
            Activation::Linear,
        );
        let enc_content = Mlp::new(
            "enc_content",
            mlp_dims(dims.semantic, &arch.encoder_hidden, dims.content),
            Activation::Linear,
        );
        let enc_sensitive = Mlp::new(
            "enc_sensitive",
            mlp_dims(dims.semantic, &arch.encoder_hidden, dims.sensitive),
            Activation::Linear,
        );
        let dec_inner = Mlp::new(
            "dec_inner",
            mlp_dims(
                dims.content + dims.sensitive,
                &arch.decoder_hidden,
                dims.semantic,
            ),
            Activation::Linear,
        );
        let dec_outer = Mlp::new(
            "dec_outer",
            mlp_dims(dims.semantic + dims.style, &arch.decoder_hidden, dims.feature),
            Activation::Linear,
        );
        let sensitive_clf = Mlp::new(
            "sensitive_clf",
            mlp_dims(dims.sensitive, &arch.sensitive_hidden, 2),
            Activation::SoftmaxLast,
        );
        let disc_inner = Mlp::new(
            "disc_inner",
            mlp_dims(dims.semantic, &arch.disc_hidden, 1),
            Activation::Sigmoid,
        );
        let disc_outer = Mlp::new(
            "disc_outer",
            mlp_dims(dims.feature, &arch.disc_hidden, 1),
            Activation::Sigmoid,
        );

        let mut model_params = ParamStore::new();
        let mut disc_params = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(derive_seed(seed, "stage1.init"));
        enc_semantic.init(&mut model_params, &mut rng);
        enc_style.init(&mut model_params, &mut rng);
        enc_content.init(&mut model_params, &mut rng);
        enc_sensitive.init(&mut model_params, &mut rng);
        dec_inner.init(&mut model_params, &mut rng);
        dec_outer.init(&mut model_params, &mut rng);
        sensitive_clf.init(&mut model_params, &mut rng);
        disc_inner.init(&mut disc_params, &mut rng);
        disc_outer.init(&mut disc_params, &mut rng);

        Self {
            dims,
            enc_semantic,
            enc_style,
            enc_content,
            enc_sensitive,
            dec_inner,
            dec_outer,
            sensitive_clf,
            disc_inner,
            disc_outer,
            model_params,
            disc_params,
        }
    }

    /// Rebuild a model around parameter stores loaded from a checkpoint;
    /// layer widths are recovered from the stored tensor shapes.
    pub fn from_stores(
        dims: LatentDims,
        model_params: ParamStore<f64>,
        disc_params: ParamStore<f64>,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            dims,
            enc_semantic: Mlp::from_store("enc_semantic", &model_params, Activation::Linear)?,
            enc_style: Mlp::from_store("enc_style", &model_params, Activation::Linear)?,
            enc_content: Mlp::from_store("enc_content", &model_params, Activation::Linear)?,
            enc_sensitive: Mlp::from_store("enc_sensitive", &model_params, Activation::Linear)?,
            dec_inner: Mlp::from_store("dec_inner", &model_params, Activation::Linear)?,
            dec_outer: Mlp::from_store("dec_outer", &model_params, Activation::Linear)?,
            sensitive_clf: Mlp::from_store(
                "sensitive_clf",
                &model_params,
                Activation::SoftmaxLast,
            )?,
            disc_inner: Mlp::from_store("disc_inner", &disc_params, Activation::Sigmoid)?,
            disc_outer: Mlp::from_store("disc_outer", &disc_params, Activation::Sigmoid)?,
            model_params,
            disc_params,
        })
    }
}

/// Stage-1 training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Hyper {
    /// Weight of the sensitive-prediction loss.
    pub beta_sensitive: f64,
    /// Weight of the adversarial loss.
    pub beta_adversarial: f64,
    pub lr_model: f64,
    pub lr_disc: f64,
    pub steps: usize,
    pub batch: usize,
    /// Use the non-saturating generator objective instead of the literal
    /// `log(1 - D(fake))` form.
    pub non_saturating: bool,
    pub seed: u64,
}

impl Default for Stage1Hyper {
    fn default() -> Self {
        Self {
            beta_sensitive: 20.0,
            beta_adversarial: 0.1,
            lr_model: 2e-3,
            lr_disc: 2e-3,
            steps: 500,
            batch: 48,
            non_saturating: false,
            seed: 0,
        }
    }
}

impl Stage1Hyper {
    pub fn validate(&self) -> Result<(), Stage1Error> {
        if self.beta_sensitive < 0.0 || self.beta_adversarial < 0.0 {
            return Err(Stage1Error::InvalidHyper(
                "loss weights must be nonnegative".into(),
            ));
        }
        if self.lr_model < 0.0 || self.lr_disc < 0.0 {
            return Err(Stage1Error::InvalidHyper(
                "learning rates must be nonnegative".into(),
            ));
        }
        if self.batch == 0 {
            return Err(Stage1Error::InvalidHyper("batch must be positive".into()));
        }
        Ok(())
    }
}

/// The seven reconstruction terms and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconLosses {
    /// Input reconstructed through both levels.
    pub feature: f64,
    /// Semantic factor reconstructed by the inner level from data latents.
    pub semantic: f64,
    /// Content recovered after decoding with a sampled sensitive factor.
    pub content: f64,
    /// Sampled sensitive factor recovered after the inner decode.
    pub sensitive: f64,
    /// Sampled style recovered through the outer decode of a data semantic.
    pub style_real: f64,
    /// Sampled style recovered through the fully synthetic outer decode.
    pub style_synth: f64,
    /// Data semantic recovered after an outer decode with sampled style.
    pub semantic_cycle: f64,
    pub total: f64,
}

/// One history row of stage-1 training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub step: usize,
    pub recon: ReconLosses,
    pub sensitive_pred: f64,
    pub disc_objective: f64,
    pub gen_objective: f64,
}

struct LatentNodes {
    semantic: Tensor,
    content: Tensor,
    style: Tensor,
    sensitive: Tensor,
}

fn encode_nodes(
    g: &mut Graph<f64>,
    model: &DisentangleModel,
    x: &Tensor,
) -> Result<LatentNodes, TensorError> {
    let semantic = model.enc_semantic.forward(g, &model.model_params, x)?;
    let style = model.enc_style.forward(g, &model.model_params, x)?;
    let content = model.enc_content.forward(g, &model.model_params, &semantic)?;
    let sensitive = model
        .enc_sensitive
        .forward(g, &model.model_params, &semantic)?;
    Ok(LatentNodes {
        semantic,
        content,
        style,
        sensitive,
    })
}

fn sample_standard(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    TensorBase::from_vec(vec![rows, cols], data).expect("prior sample shape")
}

/// Mean over the batch of row-wise L1 distances.
fn l1_mean(
    g: &mut Graph<f64>,
    a: &Tensor,
    b: &Tensor,
    batch: usize,
) -> Result<Tensor, TensorError> {
    let diff = g.sub(a, b)?;
    let norm = g.l1_norm(&diff)?;
    g.scalar_mul(&norm, 1.0 / batch as f64)
}

/// Mean over the batch of `log t` for a `[batch, 1]` tensor.
fn mean_log(g: &mut Graph<f64>, t: &Tensor) -> Result<Tensor, TensorError> {
    let logs = g.log(t)?;
    g.mean(&logs)
}

/// Mean of `log(1 - t)`.
fn mean_log_one_minus(g: &mut Graph<f64>, t: &Tensor) -> Result<Tensor, TensorError> {
    let ones = g.constant(&Tensor::filled(t.shape().to_vec(), 1.0))?;
    let flipped = g.sub(&ones, t)?;
    mean_log(g, &flipped)
}

struct ReconNodes {
    feature: Tensor,
    semantic: Tensor,
    content: Tensor,
    sensitive: Tensor,
    style_real: Tensor,
    style_synth: Tensor,
    semantic_cycle: Tensor,
    total: Tensor,
}

fn recon_nodes(
    g: &mut Graph<f64>,
    model: &DisentangleModel,
    x: &Tensor,
    lat: &LatentNodes,
    rng: &mut StdRng,
) -> Result<ReconNodes, TensorError> {
    let batch = x.shape()[0];
    let dims = model.dims;
    let mp = &model.model_params;

    // Both-level reconstruction of the input.
    let inner_in = g.concat_last(&lat.content, &lat.sensitive)?;
    let semantic_hat = model.dec_inner.forward(g, mp, &inner_in)?;
    let outer_in = g.concat_last(&semantic_hat, &lat.style)?;
    let x_hat = model.dec_outer.forward(g, mp, &outer_in)?;
    let feature = l1_mean(g, &x_hat, x, batch)?;

    // The decoded semantic reconstructs the encoded one.
    let semantic = l1_mean(g, &semantic_hat, &lat.semantic, batch)?;

    // Content recovered with a sampled sensitive factor.
    let a_prior = g.constant(&sample_standard(rng, batch, dims.sensitive))?;
    let synth_in = g.concat_last(&lat.content, &a_prior)?;
    let synth_semantic = model.dec_inner.forward(g, mp, &synth_in)?;
    let content_rec = model.enc_content.forward(g, mp, &synth_semantic)?;
    let content = l1_mean(g, &content_rec, &lat.content, batch)?;

    // Sampled sensitive factor recovered the same way (fresh sample).
    let a_prior2 = g.constant(&sample_standard(rng, batch, dims.sensitive))?;
    let synth_in2 = g.concat_last(&lat.content, &a_prior2)?;
    let synth_semantic2 = model.dec_inner.forward(g, mp, &synth_in2)?;
    let sensitive_rec = model.enc_sensitive.forward(g, mp, &synth_semantic2)?;
    let sensitive = l1_mean(g, &sensitive_rec, &a_prior2, batch)?;

    // Sampled style through the outer decode of the data semantic.
    let s_prior = g.constant(&sample_standard(rng, batch, dims.style))?;
    let outer_real = g.concat_last(&lat.semantic, &s_prior)?;
    let x_style = model.dec_outer.forward(g, mp, &outer_real)?;
    let style_rec = model.enc_style.forward(g, mp, &x_style)?;
    let style_real = l1_mean(g, &style_rec, &s_prior, batch)?;

    // Sampled style through the fully synthetic path.
    let s_prior2 = g.constant(&sample_standard(rng, batch, dims.style))?;
    let a_prior3 = g.constant(&sample_standard(rng, batch, dims.sensitive))?;
    let synth_in3 = g.concat_last(&lat.content, &a_prior3)?;
    let synth_semantic3 = model.dec_inner.forward(g, mp, &synth_in3)?;
    let outer_synth = g.concat_last(&synth_semantic3, &s_prior2)?;
    let x_synth = model.dec_outer.forward(g, mp, &outer_synth)?;
    let style_rec2 = model.enc_style.forward(g, mp, &x_synth)?;
    let style_synth = l1_mean(g, &style_rec2, &s_prior2, batch)?;

    // Data semantic recovered after an outer decode with sampled style.
    let s_prior3 = g.constant(&sample_standard(rng, batch, dims.style))?;
    let outer_cycle = g.concat_last(&lat.semantic, &s_prior3)?;
    let x_cycle = model.dec_outer.forward(g, mp, &outer_cycle)?;
    let semantic_rec = model.enc_semantic.forward(g, mp, &x_cycle)?;
    let semantic_cycle = l1_mean(g, &semantic_rec, &lat.semantic, batch)?;

    let mut total = g.add(&feature, &semantic)?;
    total = g.add(&total, &content)?;
    total = g.add(&total, &sensitive)?;
    total = g.add(&total, &style_real)?;
    total = g.add(&total, &style_synth)?;
    total = g.add(&total, &semantic_cycle)?;

    Ok(ReconNodes {
        feature,
        semantic,
        content,
        sensitive,
        style_real,
        style_synth,
        semantic_cycle,
        total,
    })
}

struct AdversarialNodes {
    disc_objective: Tensor,
    gen_objective: Tensor,
}

/// Builds the adversarial objectives. The discriminator objective carries the
/// real-data term once per sampled-factor variant; the generator objective is
/// the fake-side terms only.
fn adversarial_nodes(
    g: &mut Graph<f64>,
    model: &DisentangleModel,
    x: &Tensor,
    lat: &LatentNodes,
    rng: &mut StdRng,
    non_saturating: bool,
) -> Result<AdversarialNodes, TensorError> {
    let batch = x.shape()[0];
    let dims = model.dims;
    let mp = &model.model_params;
    let dp = &model.disc_params;

    let real_outer = model.disc_outer.forward(g, dp, x)?;
    let real_outer_term = mean_log(g, &real_outer)?;

    // The three outer-level variants differ in which of (style, sensitive)
    // come from priors and which from data encodings.
    let variant_sources: [(bool, bool); 3] = [(true, true), (false, true), (true, false)];
    let mut fake_terms = Vec::with_capacity(4);
    for (style_from_prior, sensitive_from_prior) in variant_sources {
        let a_v = if sensitive_from_prior {
            g.constant(&sample_standard(rng, batch, dims.sensitive))?
        } else {
            lat.sensitive.clone()
        };
        let s_v = if style_from_prior {
            g.constant(&sample_standard(rng, batch, dims.style))?
        } else {
            lat.style.clone()
        };
        let inner_in = g.concat_last(&lat.content, &a_v)?;
        let semantic_hat = model.dec_inner.forward(g, mp, &inner_in)?;
        let outer_in = g.concat_last(&semantic_hat, &s_v)?;
        let fake = model.dec_outer.forward(g, mp, &outer_in)?;
        let d_fake = model.disc_outer.forward(g, dp, &fake)?;
        fake_terms.push(d_fake);
    }

    // Inner level: decoded semantic with a sampled sensitive factor vs real.
    let a_inner = g.constant(&sample_standard(rng, batch, dims.sensitive))?;
    let inner_in = g.concat_last(&lat.content, &a_inner)?;
    let fake_semantic = model.dec_inner.forward(g, mp, &inner_in)?;
    let d_fake_inner = model.disc_inner.forward(g, dp, &fake_semantic)?;
    let real_inner = model.disc_inner.forward(g, dp, &lat.semantic)?;
    let real_inner_term = mean_log(g, &real_inner)?;
    fake_terms.push(d_fake_inner);

    let mut disc_objective: Option<Tensor> = None;
    let mut gen_objective: Option<Tensor> = None;
    for (i, d_fake) in fake_terms.iter().enumerate() {
        let fake_term = mean_log_one_minus(g, d_fake)?;
        let real_term = if i < 3 { &real_outer_term } else { &real_inner_term };
        let pair = g.add(&fake_term, real_term)?;
        disc_objective = Some(match disc_objective {
            Some(acc) => g.add(&acc, &pair)?,
            None => pair,
        });
        let gen_term = if non_saturating {
            let ml = mean_log(g, d_fake)?;
            g.scalar_mul(&ml, -1.0)?
        } else {
            fake_term
        };
        gen_objective = Some(match gen_objective {
            Some(acc) => g.add(&acc, &gen_term)?,
            None => gen_term,
        });
    }

    Ok(AdversarialNodes {
        disc_objective: disc_objective.unwrap(),
        gen_objective: gen_objective.unwrap(),
    })
}

fn check_batch(batch: &[Example], dims: LatentDims) -> Result<(), Stage1Error> {
    if batch.is_empty() {
        return Err(Stage1Error::EmptyBatch);
    }
    for ex in batch {
        if ex.x.len() != dims.feature {
            return Err(Stage1Error::Data(DataError::DimensionMismatch {
                expected: dims.feature,
                got: ex.x.len(),
            }));
        }
    }
    Ok(())
}

/// Encode one example into its four latent factors.
pub fn encode(model: &DisentangleModel, x: &[f64]) -> Result<LatentBundle, Stage1Error> {
    if x.len() != model.dims.feature {
        return Err(Stage1Error::Data(DataError::DimensionMismatch {
            expected: model.dims.feature,
            got: x.len(),
        }));
    }
    let mut g = Graph::new();
    let xt = Tensor::row(x.to_vec());
    let lat = encode_nodes(&mut g, model, &xt)?;
    Ok(LatentBundle {
        semantic: lat.semantic.data().to_vec(),
        content: lat.content.data().to_vec(),
        style: lat.style.data().to_vec(),
        sensitive: lat.sensitive.data().to_vec(),
    })
}

/// The seven reconstruction terms as batch means.
pub fn reconstruction_losses(
    model: &DisentangleModel,
    batch: &[Example],
    rng: &mut StdRng,
) -> Result<ReconLosses, Stage1Error> {
    check_batch(batch, model.dims)?;
    let mut g = Graph::new();
    let x = features_tensor(batch)?;
    let lat = encode_nodes(&mut g, model, &x)?;
    let nodes = recon_nodes(&mut g, model, &x, &lat, rng)?;
    Ok(ReconLosses {
        feature: nodes.feature.value()?,
        semantic: nodes.semantic.value()?,
        content: nodes.content.value()?,
        sensitive: nodes.sensitive.value()?,
        style_real: nodes.style_real.value()?,
        style_synth: nodes.style_synth.value()?,
        semantic_cycle: nodes.semantic_cycle.value()?,
        total: nodes.total.value()?,
    })
}

/// Mean cross-entropy of the sensitive classifier against the batch labels.
pub fn sensitive_loss(model: &DisentangleModel, batch: &[Example]) -> Result<f64, Stage1Error> {
    check_batch(batch, model.dims)?;
    let mut g = Graph::new();
    let x = features_tensor(batch)?;
    let lat = encode_nodes(&mut g, model, &x)?;
    let probs = model
        .sensitive_clf
        .forward(&mut g, &model.model_params, &lat.sensitive)?;
    let classes = sensitive_classes(batch);
    let node = cross_entropy_node(&mut g, &probs, &classes)?;
    Ok(node.value()?)
}

/// Value the discriminators maximize and the value the encoders/decoders
/// minimize, on one batch with the given sample stream.
pub fn adversarial_losses(
    model: &DisentangleModel,
    batch: &[Example],
    rng: &mut StdRng,
    non_saturating: bool,
) -> Result<(f64, f64), Stage1Error> {
    check_batch(batch, model.dims)?;
    let mut g = Graph::new();
    let x = features_tensor(batch)?;
    let lat = encode_nodes(&mut g, model, &x)?;
    let adv = adversarial_nodes(&mut g, model, &x, &lat, rng, non_saturating)?;
    Ok((adv.disc_objective.value()?, adv.gen_objective.value()?))
}

/// Analytic gradients of the full stage-1 objective (reconstruction sum,
/// weighted sensitive prediction, weighted adversarial value) with respect
/// to every parameter store, at fixed sample streams. The sample draws match
/// `reconstruction_losses` and `adversarial_losses` seeded the same way.
pub fn stage1_total_gradients(
    model: &DisentangleModel,
    batch: &[Example],
    beta_sensitive: f64,
    beta_adversarial: f64,
    recon_seed: u64,
    adversarial_seed: u64,
) -> Result<crate::graph::GradientMap<f64>, Stage1Error> {
    check_batch(batch, model.dims)?;
    let mut g = Graph::new();
    let x = features_tensor(batch)?;
    let lat = encode_nodes(&mut g, model, &x)?;
    let mut recon_rng = StdRng::seed_from_u64(recon_seed);
    let recon = recon_nodes(&mut g, model, &x, &lat, &mut recon_rng)?;
    let probs = model
        .sensitive_clf
        .forward(&mut g, &model.model_params, &lat.sensitive)?;
    let cls = cross_entropy_node(&mut g, &probs, &sensitive_classes(batch))?;
    let mut adv_rng = StdRng::seed_from_u64(adversarial_seed);
    let adv = adversarial_nodes(&mut g, model, &x, &lat, &mut adv_rng, false)?;
    let weighted_cls = g.scalar_mul(&cls, beta_sensitive)?;
    let weighted_adv = g.scalar_mul(&adv.disc_objective, beta_adversarial)?;
    let mut total = g.add(&recon.total, &weighted_cls)?;
    total = g.add(&total, &weighted_adv)?;
    Ok(g.backward(&total)?)
}

/// Predicted sensitive label from a sensitive latent: argmax class mapped to
/// {-1, +1}, exact ties resolved to +1.
pub fn predict_sensitive(
    model: &DisentangleModel,
    sensitive: &[f64],
) -> Result<(i8, f64), Stage1Error> {
    if sensitive.len() != model.dims.sensitive {
        return Err(Stage1Error::Data(DataError::DimensionMismatch {
            expected: model.dims.sensitive,
            got: sensitive.len(),
        }));
    }
    let mut g = Graph::new();
    let a = Tensor::row(sensitive.to_vec());
    let probs = model
        .sensitive_clf
        .forward(&mut g, &model.model_params, &a)?;
    let row = probs.row_slice(0);
    if row[1] >= row[0] {
        Ok((1, row[1]))
    } else {
        Ok((-1, row[0]))
    }
}

#[cfg(test)]
fn sensitive_probs_node(
    g: &mut Graph<f64>,
    model: &DisentangleModel,
    sensitive: &Tensor,
) -> Result<Tensor, TensorError> {
    model
        .sensitive_clf
        .forward(g, &model.model_params, sensitive)
}

pub(crate) fn transform_nodes(
    g: &mut Graph<f64>,
    model: &DisentangleModel,
    x: &Tensor,
    sensitive_prior: &Tensor,
    style_prior: &Tensor,
) -> Result<(Tensor, Tensor), TensorError> {
    let mp = &model.model_params;
    let semantic = model.enc_semantic.forward(g, mp, x)?;
    let content = model.enc_content.forward(g, mp, &semantic)?;
    let inner_in = g.concat_last(&content, sensitive_prior)?;
    let semantic_new = model.dec_inner.forward(g, mp, &inner_in)?;
    let outer_in = g.concat_last(&semantic_new, style_prior)?;
    let x_new = model.dec_outer.forward(g, mp, &outer_in)?;
    Ok((x_new, content))
}

/// Alternating adversarial training: per step one discriminator ascent step,
/// then one encoder/decoder/classifier descent step.
pub fn train_disentangler(
    model: &mut DisentangleModel,
    domains: &[DomainDataset],
    hp: &Stage1Hyper,
) -> Result<Vec<Stage1Record>, Stage1Error> {
    hp.validate()?;
    let pool: Vec<&Example> = domains.iter().flat_map(|d| d.examples.iter()).collect();
    if pool.is_empty() {
        return Err(Stage1Error::EmptyBatch);
    }
    for ex in &pool {
        if ex.eval_only {
            return Err(Stage1Error::EvalLeak {
                domain: ex.domain.clone().unwrap_or_default(),
            });
        }
    }
    check_batch(&pool.iter().take(1).map(|e| (*e).clone()).collect::<Vec<_>>(), model.dims)?;

    let mut opt_model = Optimizer::adam(hp.lr_model)?;
    let mut opt_disc = Optimizer::adam(hp.lr_disc)?;
    let mut history = Vec::with_capacity(hp.steps);

    for step in 0..hp.steps {
        let mut batch_rng =
            StdRng::seed_from_u64(derive_seed(hp.seed, &format!("stage1.batch.{step}")));
        let mut prior_rng =
            StdRng::seed_from_u64(derive_seed(hp.seed, &format!("stage1.prior.{step}")));
        let take = hp.batch.min(pool.len());
        let batch: Vec<Example> = if take == pool.len() {
            pool.iter().map(|e| (*e).clone()).collect()
        } else {
            index_sample(&mut batch_rng, pool.len(), take)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect()
        };
        let diverged = |e: Stage1Error| match e {
            Stage1Error::Tensor(TensorError::NonFinite { .. }) => Stage1Error::Diverged {
                step,
                last_good: step.checked_sub(1),
            },
            other => other,
        };

        let record = stage1_step(model, &batch, hp, &mut prior_rng, &mut opt_model, &mut opt_disc, step)
            .map_err(diverged)?;
        history.push(record);
    }
    Ok(history)
}

fn stage1_step(
    model: &mut DisentangleModel,
    batch: &[Example],
    hp: &Stage1Hyper,
    prior_rng: &mut StdRng,
    opt_model: &mut Optimizer<f64>,
    opt_disc: &mut Optimizer<f64>,
    step: usize,
) -> Result<Stage1Record, Stage1Error> {
    let x = features_tensor(batch)?;
    let z_classes = sensitive_classes(batch);

    // Discriminator ascent.
    let mut g = Graph::new();
    let lat = encode_nodes(&mut g, model, &x)?;
    let adv = adversarial_nodes(&mut g, model, &x, &lat, prior_rng, hp.non_saturating)?;
    let disc_value = adv.disc_objective.value()?;
    let disc_loss = g.scalar_mul(&adv.disc_objective, -1.0)?;
    let grads = g.backward(&disc_loss)?;
    opt_disc.step(&mut model.disc_params, &grads)?;

    // Encoder/decoder/classifier descent on the weighted total.
    let mut g = Graph::new();
    let lat = encode_nodes(&mut g, model, &x)?;
    let recon = recon_nodes(&mut g, model, &x, &lat, prior_rng)?;
    let probs = model
        .sensitive_clf
        .forward(&mut g, &model.model_params, &lat.sensitive)?;
    let cls = cross_entropy_node(&mut g, &probs, &z_classes)?;
    let adv = adversarial_nodes(&mut g, model, &x, &lat, prior_rng, hp.non_saturating)?;
    let weighted_cls = g.scalar_mul(&cls, hp.beta_sensitive)?;
    let weighted_gen = g.scalar_mul(&adv.gen_objective, hp.beta_adversarial)?;
    let mut total = g.add(&recon.total, &weighted_cls)?;
    total = g.add(&total, &weighted_gen)?;

    let record = Stage1Record {
        step,
        recon: ReconLosses {
            feature: recon.feature.value()?,
            semantic: recon.semantic.value()?,
            content: recon.content.value()?,
            sensitive: recon.sensitive.value()?,
            style_real: recon.style_real.value()?,
            style_synth: recon.style_synth.value()?,
            semantic_cycle: recon.semantic_cycle.value()?,
            total: recon.total.value()?,
        },
        sensitive_pred: cls.value()?,
        disc_objective: disc_value,
        gen_objective: adv.gen_objective.value()?,
    };

    let grads = g.backward(&total)?;
    opt_model.step(&mut model.model_params, &grads)?;
    Ok(record)
}
