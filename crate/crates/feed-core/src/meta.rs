//! Stage-2 fairness-aware meta-learning: the classifier, its three losses,
//! the primal-dual inner/outer loops, downstream adaptation, ERM baselines,
//! and the two ablations.

use rand::rngs::StdRng;
use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batches::{class_labels, cross_entropy_node, features_tensor};
use crate::data::{derive_seed, sample_tasks, DataError, DomainDataset, Example, Task, TaskMode};
use crate::disentangle::{DisentangleModel, Stage1Error};
use crate::graph::{Graph, GradientMap};
use crate::nn::{Activation, Mlp, ParamStore};
use crate::optim::Optimizer;
use crate::tensor::{TensorBase, TensorError};
use crate::transform::augment_batch;

type Tensor = TensorBase<f64>;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Stage1(#[from] Stage1Error),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("group proportion must lie strictly inside (0, 1), got {p1}")]
    BadProportion { p1: f64 },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("training received an evaluation-split example from domain `{domain}`")]
    EvalLeak { domain: String },
    #[error("loss diverged at iteration {iter}")]
    Diverged { iter: usize },
}

/// Classifier: four fully-connected layers ending in a two-logit softmax.
#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub arch: Mlp,
    pub params: ParamStore<f64>,
}

impl ClassifierParams {
    pub fn new(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let arch = Mlp::new(
            "clf",
            vec![input_dim, hidden, hidden, hidden, 2],
            Activation::SoftmaxLast,
        );
        let mut params = ParamStore::new();
        arch.init(&mut params, &mut StdRng::seed_from_u64(derive_seed(seed, "clf.init")));
        Self { arch, params }
    }

    pub fn from_store(params: ParamStore<f64>) -> Result<Self, TensorError> {
        let arch = Mlp::from_store("clf", &params, Activation::SoftmaxLast)?;
        Ok(Self { arch, params })
    }

    /// Same architecture around replacement parameters.
    pub fn with_params(&self, params: ParamStore<f64>) -> Self {
        Self {
            arch: self.arch.clone(),
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }
}

/// Dual variables for the invariance and fairness constraints, their slack
/// constants, and the dual step size. The multipliers stay nonnegative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda_inv: f64,
    pub lambda_fair: f64,
    pub gamma_inv: f64,
    pub gamma_fair: f64,
    pub eta: f64,
}

impl DualState {
    pub fn new(
        lambda_inv: f64,
        lambda_fair: f64,
        gamma_inv: f64,
        gamma_fair: f64,
        eta: f64,
    ) -> Result<Self, MetaError> {
        if lambda_inv < 0.0 || lambda_fair < 0.0 {
            return Err(MetaError::InvalidHyper(
                "dual variables must be nonnegative".into(),
            ));
        }
        if gamma_inv <= 0.0 || gamma_fair <= 0.0 {
            return Err(MetaError::InvalidHyper(
                "slack constants must be positive".into(),
            ));
        }
        if eta < 0.0 {
            return Err(MetaError::InvalidHyper(
                "dual learning rate must be nonnegative".into(),
            ));
        }
        Ok(Self {
            lambda_inv,
            lambda_fair,
            gamma_inv,
            gamma_fair,
            eta,
        })
    }
}

/// Projected dual ascent on both multipliers.
pub fn dual_update(duals: &DualState, inv_value: f64, fair_value: f64) -> DualState {
    DualState {
        lambda_inv: (duals.lambda_inv + duals.eta * (inv_value - duals.gamma_inv)).max(0.0),
        lambda_fair: (duals.lambda_fair + duals.eta * (fair_value - duals.gamma_fair)).max(0.0),
        ..*duals
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FairnessVariant {
    /// The printed form with the inner absolute value. Minimized by driving
    /// all predictions to zero, so it is not the default.
    Literal,
    /// Covariance-style surrogate without the inner absolute value.
    Signed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaHyper {
    /// Inner-loop Adam rate.
    pub inner_lr: f64,
    /// Outer gradient-descent rate.
    pub meta_lr: f64,
    pub inner_steps: usize,
    pub tasks_per_iter: usize,
    pub meta_iters: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub lambda_inv_init: f64,
    pub lambda_fair_init: f64,
    pub eta_dual: f64,
    pub gamma_inv: f64,
    pub gamma_fair: f64,
    pub variant: FairnessVariant,
    pub task_mode: TaskMode,
    /// Keep a parameter snapshot every this many iterations (0 = none);
    /// the final iterate is always included when enabled.
    pub snapshot_every: usize,
    pub seed: u64,
}

impl Default for MetaHyper {
    fn default() -> Self {
        Self {
            inner_lr: 1e-2,
            meta_lr: 8e-2,
            inner_steps: 5,
            tasks_per_iter: 4,
            meta_iters: 1000,
            support_size: 32,
            query_size: 32,
            lambda_inv_init: 1.0,
            lambda_fair_init: 1.0,
            eta_dual: 0.1,
            gamma_inv: 0.01,
            gamma_fair: 0.065,
            variant: FairnessVariant::Signed,
            task_mode: TaskMode::Pooled,
            snapshot_every: 0,
            seed: 0,
        }
    }
}

impl MetaHyper {
    pub fn validate(&self) -> Result<(), MetaError> {
        if self.inner_lr < 0.0 || self.meta_lr < 0.0 || self.eta_dual < 0.0 {
            return Err(MetaError::InvalidHyper("rates must be nonnegative".into()));
        }
        if self.inner_steps == 0 {
            return Err(MetaError::InvalidHyper(
                "inner_steps must be at least 1".into(),
            ));
        }
        if self.tasks_per_iter == 0 || self.support_size == 0 || self.query_size == 0 {
            return Err(MetaError::InvalidHyper(
                "task and batch sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn duals(&self) -> Result<DualState, MetaError> {
        DualState::new(
            self.lambda_inv_init,
            self.lambda_fair_init,
            self.gamma_inv,
            self.gamma_fair,
            self.eta_dual,
        )
    }
}

/// Per-iteration seed of the task sampler, exposed so oracles can replay
/// the exact task sequence.
pub fn iteration_task_seed(seed: u64, iter: usize) -> u64 {
    derive_seed(seed, &format!("meta.tasks.{iter}"))
}

fn guard_training_pool(examples: &[&Example]) -> Result<(), MetaError> {
    for ex in examples {
        if ex.eval_only {
            return Err(MetaError::EvalLeak {
                domain: ex.domain.clone().unwrap_or_default(),
            });
        }
    }
    Ok(())
}

/// Two-class probabilities for one input.
pub fn classify(clf: &ClassifierParams, x: &[f64]) -> Result<Vec<f64>, MetaError> {
    if x.len() != clf.input_dim() {
        return Err(MetaError::Data(DataError::DimensionMismatch {
            expected: clf.input_dim(),
            got: x.len(),
        }));
    }
    let mut g = Graph::new();
    let probs = clf
        .arch
        .forward(&mut g, &clf.params, &Tensor::row(x.to_vec()))?;
    Ok(probs.row_slice(0).to_vec())
}

fn probs_node(
    g: &mut Graph<f64>,
    clf: &ClassifierParams,
    params: &ParamStore<f64>,
    batch: &[Example],
) -> Result<Tensor, MetaError> {
    if batch.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    let x = features_tensor(batch)?;
    if x.shape()[1] != clf.input_dim() {
        return Err(MetaError::Data(DataError::DimensionMismatch {
            expected: clf.input_dim(),
            got: x.shape()[1],
        }));
    }
    Ok(clf.arch.forward(g, params, &x)?)
}

/// Mean KL divergence between probability rows, `KL(p_i || q_i)`.
fn kl_node(g: &mut Graph<f64>, p: &Tensor, q: &Tensor) -> Result<Tensor, TensorError> {
    let log_p = g.log(p)?;
    let log_q = g.log(q)?;
    let diff = g.sub(&log_p, &log_q)?;
    let weighted = g.mul(p, &diff)?;
    let total = g.sum(&weighted)?;
    g.scalar_mul(&total, 1.0 / p.shape()[0] as f64)
}

/// The fairness surrogate for one example.
pub fn fair_g(p1: f64, z: i8, f_value: f64, variant: FairnessVariant) -> Result<f64, MetaError> {
    if !(p1 > 0.0 && p1 < 1.0) {
        return Err(MetaError::BadProportion { p1 });
    }
    let coef = ((z as f64 + 1.0) / 2.0 - p1) / (p1 * (1.0 - p1));
    let signed = coef * f_value;
    Ok(match variant {
        FairnessVariant::Literal => signed.abs(),
        FairnessVariant::Signed => signed,
    })
}

/// Fairness term of one batch: `|mean g|`. The coefficient numerators are
/// exact integers `(1[z=1] * n - n1)` so that group-balanced cancellations
/// survive floating point. Returns a constant zero and raises the degeneracy
/// flag when the batch holds a single group.
fn fair_batch_node(
    g: &mut Graph<f64>,
    f_prob: &Tensor,
    zs: &[i8],
    variant: FairnessVariant,
) -> Result<(Tensor, bool), TensorError> {
    let n = zs.len();
    let n1 = zs.iter().filter(|z| **z > 0).count();
    let n0 = n - n1;
    if n1 == 0 || n0 == 0 {
        let zero = g.constant(&Tensor::scalar(0.0))?;
        return Ok((zero, true));
    }
    let numerators: Vec<f64> = zs
        .iter()
        .map(|z| {
            let ind = if *z > 0 { 1.0 } else { 0.0 };
            ind * n as f64 - n1 as f64
        })
        .collect();
    let num = g.constant(&Tensor::from_vec(vec![n, 1], numerators)?)?;
    let weighted = g.mul(&num, f_prob)?;
    let node = match variant {
        FairnessVariant::Signed => {
            let total = g.sum(&weighted)?;
            let mean = g.scalar_mul(&total, 1.0 / (n1 as f64 * n0 as f64))?;
            g.abs(&mean)?
        }
        FairnessVariant::Literal => {
            let scaled = g.scalar_mul(&weighted, n as f64 / (n1 as f64 * n0 as f64))?;
            let per_example = g.abs(&scaled)?;
            let total = g.sum(&per_example)?;
            let mean = g.scalar_mul(&total, 1.0 / n as f64)?;
            g.abs(&mean)?
        }
    };
    Ok((node, false))
}

struct Stage2Nodes {
    cls: Tensor,
    inv: Tensor,
    fair: Tensor,
    total: Tensor,
    degenerate: u32,
}

fn stage2_nodes(
    g: &mut Graph<f64>,
    clf: &ClassifierParams,
    params: &ParamStore<f64>,
    batch: &[Example],
    batch_aug: &[Example],
    duals: &DualState,
    variant: FairnessVariant,
) -> Result<Stage2Nodes, MetaError> {
    if batch.len() != batch_aug.len() {
        return Err(MetaError::LengthMismatch {
            left: batch.len(),
            right: batch_aug.len(),
        });
    }
    let probs = probs_node(g, clf, params, batch)?;
    let probs_aug = probs_node(g, clf, params, batch_aug)?;
    let cls = cross_entropy_node(g, &probs, &class_labels(batch))?;
    let inv = kl_node(g, &probs, &probs_aug)?;

    let f = g.slice_last(&probs, 1, 2)?;
    let f_aug = g.slice_last(&probs_aug, 1, 2)?;
    let zs: Vec<i8> = batch.iter().map(|e| e.z).collect();
    let zs_aug: Vec<i8> = batch_aug.iter().map(|e| e.z).collect();
    let (term, degenerate_a) = fair_batch_node(g, &f, &zs, variant)?;
    let (term_aug, degenerate_b) = fair_batch_node(g, &f_aug, &zs_aug, variant)?;
    let fair = g.add(&term, &term_aug)?;

    let weighted_inv = g.scalar_mul(&inv, duals.lambda_inv)?;
    let weighted_fair = g.scalar_mul(&fair, duals.lambda_fair)?;
    let mut total = g.add(&cls, &weighted_inv)?;
    total = g.add(&total, &weighted_fair)?;
    Ok(Stage2Nodes {
        cls,
        inv,
        fair,
        total,
        degenerate: degenerate_a as u32 + degenerate_b as u32,
    })
}

/// Mean cross-entropy of the classifier on a batch.
pub fn loss_cls(clf: &ClassifierParams, batch: &[Example]) -> Result<f64, MetaError> {
    let mut g = Graph::new();
    let probs = probs_node(&mut g, clf, &clf.params, batch)?;
    let node = cross_entropy_node(&mut g, &probs, &class_labels(batch))?;
    Ok(node.value()?)
}

/// Mean KL between predictions on a batch and its aligned transforms.
pub fn loss_inv(
    clf: &ClassifierParams,
    batch: &[Example],
    batch_aug: &[Example],
) -> Result<f64, MetaError> {
    if batch.len() != batch_aug.len() {
        return Err(MetaError::LengthMismatch {
            left: batch.len(),
            right: batch_aug.len(),
        });
    }
    let mut g = Graph::new();
    let probs = probs_node(&mut g, clf, &clf.params, batch)?;
    let probs_aug = probs_node(&mut g, clf, &clf.params, batch_aug)?;
    let node = kl_node(&mut g, &probs, &probs_aug)?;
    Ok(node.value()?)
}

/// Fairness loss value plus the count of single-group batches that were
/// downgraded to a zero term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FairLoss {
    pub value: f64,
    pub degenerate_batches: u32,
}

/// `|mean g|` over the batch plus the same over the transformed batch, with
/// the group proportion computed independently per batch.
pub fn loss_fair(
    clf: &ClassifierParams,
    batch: &[Example],
    batch_aug: &[Example],
    variant: FairnessVariant,
) -> Result<FairLoss, MetaError> {
    let mut g = Graph::new();
    let probs = probs_node(&mut g, clf, &clf.params, batch)?;
    let probs_aug = probs_node(&mut g, clf, &clf.params, batch_aug)?;
    let f = g.slice_last(&probs, 1, 2)?;
    let f_aug = g.slice_last(&probs_aug, 1, 2)?;
    let zs: Vec<i8> = batch.iter().map(|e| e.z).collect();
    let zs_aug: Vec<i8> = batch_aug.iter().map(|e| e.z).collect();
    let (term, da) = fair_batch_node(&mut g, &f, &zs, variant)?;
    let (term_aug, db) = fair_batch_node(&mut g, &f_aug, &zs_aug, variant)?;
    let node = g.add(&term, &term_aug)?;
    Ok(FairLoss {
        value: node.value()?,
        degenerate_batches: da as u32 + db as u32,
    })
}

/// The weighted stage-2 objective at the current dual variables.
pub fn loss_total(
    clf: &ClassifierParams,
    batch: &[Example],
    batch_aug: &[Example],
    duals: &DualState,
    variant: FairnessVariant,
) -> Result<f64, MetaError> {
    let mut g = Graph::new();
    let nodes = stage2_nodes(&mut g, clf, &clf.params, batch, batch_aug, duals, variant)?;
    Ok(nodes.total.value()?)
}

/// Analytic gradients of the weighted stage-2 objective with respect to the
/// classifier parameters.
pub fn total_loss_gradients(
    clf: &ClassifierParams,
    batch: &[Example],
    batch_aug: &[Example],
    duals: &DualState,
    variant: FairnessVariant,
) -> Result<GradientMap<f64>, MetaError> {
    let mut g = Graph::new();
    let nodes = stage2_nodes(&mut g, clf, &clf.params, batch, batch_aug, duals, variant)?;
    Ok(g.backward(&nodes.total)?)
}

fn map_diverged(iter: usize) -> impl Fn(MetaError) -> MetaError {
    move |e| match e {
        MetaError::Tensor(TensorError::NonFinite { .. })
        | MetaError::Stage1(Stage1Error::Tensor(TensorError::NonFinite { .. })) => {
            MetaError::Diverged { iter }
        }
        other => other,
    }
}

/// The inner adaptation machinery shared by the meta inner loop, downstream
/// adaptation, and the no-augment ablation: a fixed number of Adam steps on
/// the total loss, then one dual update from the final support losses.
pub(crate) fn adapt_on_batch(
    clf: &ClassifierParams,
    support: &[Example],
    duals: &DualState,
    model: Option<&DisentangleModel>,
    hp: &MetaHyper,
    rng: &mut StdRng,
) -> Result<(ParamStore<f64>, DualState), MetaError> {
    if support.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    guard_training_pool(&support.iter().collect::<Vec<_>>())?;
    let support_aug = match model {
        Some(m) => augment_batch(m, support, rng)?,
        None => support.to_vec(),
    };
    let mut params = clf.params.clone();
    let mut opt = Optimizer::adam(hp.inner_lr)?;
    for _ in 0..hp.inner_steps {
        let mut g = Graph::new();
        let nodes = stage2_nodes(&mut g, clf, &params, support, &support_aug, duals, hp.variant)?;
        let grads = g.backward(&nodes.total)?;
        opt.step(&mut params, &grads)?;
    }
    let mut g = Graph::new();
    let nodes = stage2_nodes(&mut g, clf, &params, support, &support_aug, duals, hp.variant)?;
    let task_duals = dual_update(duals, nodes.inv.value()?, nodes.fair.value()?);
    Ok((params, task_duals))
}

/// Task-level adaptation: support batch augmented once, `inner_steps` Adam
/// steps, task duals updated once from the adapted support losses.
pub fn inner_adapt(
    clf: &ClassifierParams,
    task: &Task,
    duals: &DualState,
    model: &DisentangleModel,
    hp: &MetaHyper,
    rng: &mut StdRng,
) -> Result<(ParamStore<f64>, DualState), MetaError> {
    adapt_on_batch(clf, &task.support, duals, Some(model), hp, rng)
}

/// Downstream few-shot adaptation with the same machinery as the inner loop.
/// Pass `None` for the stage-1 model to adapt without augmentation.
pub fn adapt_downstream(
    clf: &ClassifierParams,
    fewshot: &[Example],
    model: Option<&DisentangleModel>,
    hp: &MetaHyper,
    duals: &DualState,
) -> Result<(ParamStore<f64>, DualState), MetaError> {
    let mut rng = StdRng::seed_from_u64(derive_seed(hp.seed, "downstream.aug"));
    adapt_on_batch(clf, fewshot, duals, model, hp, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub iter: usize,
    pub query_cls: f64,
    pub query_inv: f64,
    pub query_fair: f64,
    pub query_total: f64,
    pub lambda_inv: f64,
    pub lambda_fair: f64,
    /// Mean L1 distance between adapted and meta parameters.
    pub inner_delta: f64,
    pub degenerate_batches: u32,
}

#[derive(Clone, Debug)]
pub struct MetaSnapshot {
    pub iter: usize,
    pub params: ParamStore<f64>,
    pub duals: DualState,
}

#[derive(Clone, Debug)]
pub struct MetaOutcome {
    pub history: Vec<MetaRecord>,
    pub snapshots: Vec<MetaSnapshot>,
    pub duals: DualState,
}

#[derive(Clone, Copy, Debug)]
struct MetaMode {
    inner_loop: bool,
    augment: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationKind {
    /// Query loss taken directly at the meta parameters.
    NoInnerLoop,
    /// Transformed batches replaced by the originals.
    NoAugment,
}

fn apply_sgd(params: &mut ParamStore<f64>, grads: &GradientMap<f64>, lr: f64) {
    for (name, tensor) in params.iter_mut() {
        if let Some(g) = grads.get(name) {
            for (p, gv) in tensor.data_mut().iter_mut().zip(g.data()) {
                *p -= lr * gv;
            }
        }
    }
}

/// First-order meta-training of the classifier initialization.
pub fn meta_train(
    clf: &mut ClassifierParams,
    pool: &[DomainDataset],
    model: &DisentangleModel,
    hp: &MetaHyper,
) -> Result<MetaOutcome, MetaError> {
    meta_train_mode(
        clf,
        pool,
        Some(model),
        hp,
        MetaMode {
            inner_loop: true,
            augment: true,
        },
    )
}

/// The two ablations share the full training loop with one switch flipped.
pub fn run_ablation(
    kind: AblationKind,
    clf: &mut ClassifierParams,
    pool: &[DomainDataset],
    model: &DisentangleModel,
    hp: &MetaHyper,
) -> Result<MetaOutcome, MetaError> {
    let mode = match kind {
        AblationKind::NoInnerLoop => MetaMode {
            inner_loop: false,
            augment: true,
        },
        AblationKind::NoAugment => MetaMode {
            inner_loop: true,
            augment: false,
        },
    };
    let model = if mode.augment { Some(model) } else { None };
    meta_train_mode(clf, pool, model, hp, mode)
}

fn meta_train_mode(
    clf: &mut ClassifierParams,
    pool: &[DomainDataset],
    model: Option<&DisentangleModel>,
    hp: &MetaHyper,
    mode: MetaMode,
) -> Result<MetaOutcome, MetaError> {
    hp.validate()?;
    if pool.iter().all(|d| d.is_empty()) {
        return Err(MetaError::EmptyBatch);
    }
    guard_training_pool(&pool.iter().flat_map(|d| d.examples.iter()).collect::<Vec<_>>())?;

    let mut duals = hp.duals()?;
    // Dedicated augmentation streams per call site, so disabling either
    // leaves the other untouched.
    let mut support_rng = StdRng::seed_from_u64(derive_seed(hp.seed, "meta.aug.support"));
    let mut query_rng = StdRng::seed_from_u64(derive_seed(hp.seed, "meta.aug.query"));

    let mut history = Vec::with_capacity(hp.meta_iters);
    let mut snapshots = Vec::new();

    for iter in 0..hp.meta_iters {
        let tasks = sample_tasks(
            pool,
            hp.tasks_per_iter,
            hp.support_size,
            hp.query_size,
            hp.task_mode,
            iteration_task_seed(hp.seed, iter),
        )?;

        let mut grad_sum = GradientMap::new();
        let mut sums = (0.0, 0.0, 0.0, 0.0); // cls, inv, fair, total
        let mut degenerate = 0u32;
        let mut inner_delta = 0.0;

        for task in &tasks {
            let adapted = if mode.inner_loop {
                let (params, _task_duals) = adapt_on_batch(
                    clf,
                    &task.support,
                    &duals,
                    model,
                    hp,
                    &mut support_rng,
                )
                .map_err(map_diverged(iter))?;
                params
            } else {
                clf.params.clone()
            };
            let query_aug = match (mode.augment, model) {
                (true, Some(m)) => {
                    augment_batch(m, &task.query, &mut query_rng).map_err(MetaError::from)?
                }
                _ => task.query.clone(),
            };

            let mut g = Graph::new();
            let nodes = stage2_nodes(
                &mut g,
                clf,
                &adapted,
                &task.query,
                &query_aug,
                &duals,
                hp.variant,
            )
            .map_err(map_diverged(iter))?;
            sums.0 += nodes.cls.value()?;
            sums.1 += nodes.inv.value()?;
            sums.2 += nodes.fair.value()?;
            sums.3 += nodes.total.value()?;
            degenerate += nodes.degenerate;
            let grads = g.backward(&nodes.total).map_err(|e| {
                map_diverged(iter)(MetaError::Tensor(e))
            })?;
            grad_sum.accumulate_scaled(&grads, 1.0);
            inner_delta += adapted.l1_distance(&clf.params);
        }

        // Outer step: plain gradient descent on the summed query losses.
        apply_sgd(&mut clf.params, &grad_sum, hp.meta_lr);

        // Dual ascent once per iteration from the same query losses the
        // primal step just used (at the adapted parameters), averaged over
        // tasks. Pairing the dual update with the losses the multipliers
        // actually weight keeps the ascent direction meaningful; evaluating
        // at the freshly stepped meta parameters instead starves the duals,
        // because the meta iterate stays low-confidence while violations
        // live at the adapted parameters.
        let task_count = tasks.len().max(1) as f64;
        duals = dual_update(&duals, sums.1 / task_count, sums.2 / task_count);

        history.push(MetaRecord {
            iter,
            query_cls: sums.0 / task_count,
            query_inv: sums.1 / task_count,
            query_fair: sums.2 / task_count,
            query_total: sums.3 / task_count,
            lambda_inv: duals.lambda_inv,
            lambda_fair: duals.lambda_fair,
            inner_delta: inner_delta / task_count,
            degenerate_batches: degenerate,
        });

        if hp.snapshot_every > 0
            && ((iter + 1) % hp.snapshot_every == 0 || iter + 1 == hp.meta_iters)
        {
            snapshots.push(MetaSnapshot {
                iter: iter + 1,
                params: clf.params.clone(),
                duals,
            });
        }
    }

    Ok(MetaOutcome {
        history,
        snapshots,
        duals,
    })
}

/// Plain minibatch baseline hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErmHyper {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub snapshot_every: usize,
    pub seed: u64,
}

impl Default for ErmHyper {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 64,
            lr: 1e-3,
            snapshot_every: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErmRecord {
    pub step: usize,
    pub cls: f64,
    pub fair: f64,
    pub lambda_fair: f64,
}

#[derive(Clone, Debug)]
pub struct ErmOutcome {
    pub history: Vec<ErmRecord>,
    pub snapshots: Vec<MetaSnapshot>,
    pub duals: DualState,
}

/// Pooled minibatch training of the classifier. With the fairness flag the
/// objective gains `lambda_fair * loss_fair(theta, B, B)` (no augmentation)
/// and the fairness dual is updated each step.
pub fn train_erm(
    clf: &mut ClassifierParams,
    pool: &[DomainDataset],
    hp: &ErmHyper,
    fairness_constrained: bool,
    duals: &DualState,
    variant: FairnessVariant,
) -> Result<ErmOutcome, MetaError> {
    if hp.batch == 0 {
        return Err(MetaError::InvalidHyper("batch must be positive".into()));
    }
    let examples: Vec<&Example> = pool.iter().flat_map(|d| d.examples.iter()).collect();
    if examples.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    guard_training_pool(&examples)?;

    let mut opt = Optimizer::adam(hp.lr)?;
    let mut duals = *duals;
    let mut history = Vec::with_capacity(hp.steps);
    let mut snapshots = Vec::new();

    for step in 0..hp.steps {
        let mut batch_rng =
            StdRng::seed_from_u64(derive_seed(hp.seed, &format!("erm.batch.{step}")));
        let take = hp.batch.min(examples.len());
        let batch: Vec<Example> = if take == examples.len() {
            examples.iter().map(|e| (*e).clone()).collect()
        } else {
            index_sample(&mut batch_rng, examples.len(), take)
                .into_iter()
                .map(|i| examples[i].clone())
                .collect()
        };

        let mut g = Graph::new();
        let probs = probs_node(&mut g, clf, &clf.params, &batch).map_err(map_diverged(step))?;
        let cls = cross_entropy_node(&mut g, &probs, &class_labels(&batch))?;
        let (total, fair_value) = if fairness_constrained {
            let f = g.slice_last(&probs, 1, 2)?;
            let zs: Vec<i8> = batch.iter().map(|e| e.z).collect();
            let (term_a, _) = fair_batch_node(&mut g, &f, &zs, variant)?;
            let (term_b, _) = fair_batch_node(&mut g, &f, &zs, variant)?;
            let fair = g.add(&term_a, &term_b)?;
            let weighted = g.scalar_mul(&fair, duals.lambda_fair)?;
            (g.add(&cls, &weighted)?, fair.value()?)
        } else {
            (cls.clone(), 0.0)
        };

        let cls_value = cls.value()?;
        let grads = g
            .backward(&total)
            .map_err(|e| map_diverged(step)(MetaError::Tensor(e)))?;
        opt.step(&mut clf.params, &grads)?;

        if fairness_constrained {
            duals = dual_update(&duals, 0.0, fair_value);
        }
        history.push(ErmRecord {
            step,
            cls: cls_value,
            fair: fair_value,
            lambda_fair: duals.lambda_fair,
        });
        if hp.snapshot_every > 0
            && ((step + 1) % hp.snapshot_every == 0 || step + 1 == hp.steps)
        {
            snapshots.push(MetaSnapshot {
                iter: step + 1,
                params: clf.params.clone(),
                duals,
            });
        }
    }
    Ok(ErmOutcome {
        history,
        snapshots,
        duals,
    })
}

/// Hard-threshold accuracy at 0.5 (ties predict 1).
pub fn accuracy(clf: &ClassifierParams, examples: &[Example]) -> Result<f64, MetaError> {
    if examples.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    let mut g = Graph::new();
    let probs = probs_node(&mut g, clf, &clf.params, examples)?;
    let mut correct = 0usize;
    for (i, ex) in examples.iter().enumerate() {
        let p1 = probs.row_slice(i)[1];
        let pred: u8 = if p1 >= 0.5 { 1 } else { 0 };
        if pred == ex.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::disentangle::{DisentangleModel, LatentDims, Stage1Arch};

    fn classifier(seed: u64) -> ClassifierParams {
        ClassifierParams::new(20, 16, seed)
    }

    fn zeroed_head(mut clf: ClassifierParams) -> ClassifierParams {
        let names: Vec<String> = clf
            .params
            .names()
            .filter(|n| n.ends_with("w3") || n.ends_with("b3"))
            .cloned()
            .collect();
        for name in names {
            let shape = clf.params.get(&name).unwrap().shape().to_vec();
            clf.params.insert(name, Tensor::zeros(shape));
        }
        clf
    }

    fn batch(n: usize, seed: u64) -> Vec<Example> {
        let spec = SynthSpec::default_demo();
        generate_synthetic(&spec, n, seed).unwrap()[0].examples.clone()
    }

    fn stage1_model(seed: u64) -> DisentangleModel {
        let dims = LatentDims {
            feature: 20,
            semantic: 12,
            content: 8,
            style: 4,
            sensitive: 4,
        };
        DisentangleModel::new(dims, &Stage1Arch::default(), seed)
    }

    #[test]
    fn classify_outputs_a_distribution() {
        let clf = classifier(1);
        let x: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let p = classify(&clf, &x).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
        let q = classify(&clf, &x).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn zero_weight_head_is_uniform() {
        let clf = zeroed_head(classifier(2));
        let x = vec![0.3; 20];
        let p = classify(&clf, &x).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_predictor_cls_is_ln2() {
        let clf = zeroed_head(classifier(3));
        let b = batch(32, 1);
        let loss = loss_cls(&clf, &b).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cls_matches_per_example_recomputation() {
        let clf = classifier(4);
        let b = batch(16, 2);
        let whole = loss_cls(&clf, &b).unwrap();
        let mut sum = 0.0;
        for ex in &b {
            sum += loss_cls(&clf, std::slice::from_ref(ex)).unwrap();
        }
        assert!((whole - sum / 16.0).abs() < 1e-12);
    }

    #[test]
    fn inv_of_identical_batches_is_exactly_zero() {
        let clf = classifier(5);
        let b = batch(16, 3);
        assert_eq!(loss_inv(&clf, &b, &b).unwrap(), 0.0);
    }

    #[test]
    fn inv_hand_value() {
        // KL((0.9,0.1) || (0.5,0.5)) = 0.9 ln 1.8 + 0.1 ln 0.2
        let expected = 0.9 * (1.8f64).ln() + 0.1 * (0.2f64).ln();
        let mut g = Graph::new();
        let p = g.constant(&Tensor::row(vec![0.9, 0.1])).unwrap();
        let q = g.constant(&Tensor::row(vec![0.5, 0.5])).unwrap();
        let node = kl_node(&mut g, &p, &q).unwrap();
        assert!((node.value().unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn inv_nonnegative_on_random_pairs() {
        let clf = classifier(6);
        for seed in 0..5 {
            let a = batch(8, seed);
            let b = batch(8, seed + 100);
            assert!(loss_inv(&clf, &a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn fair_g_worked_examples() {
        let literal = fair_g(0.5, 1, 0.6, FairnessVariant::Literal).unwrap();
        assert!((literal - 1.2).abs() < 1e-12);
        let signed = fair_g(0.5, -1, 0.6, FairnessVariant::Signed).unwrap();
        assert!((signed + 1.2).abs() < 1e-12);
        assert_eq!(fair_g(0.5, 1, 0.0, FairnessVariant::Literal).unwrap(), 0.0);
        assert_eq!(fair_g(0.5, 1, 0.0, FairnessVariant::Signed).unwrap(), 0.0);
        assert!(fair_g(0.0, 1, 0.5, FairnessVariant::Signed).is_err());
        assert!(fair_g(1.0, 1, 0.5, FairnessVariant::Signed).is_err());
    }

    #[test]
    fn fair_batch_two_element_hand_value() {
        // (z=+1, f=1), (z=-1, f=0): |mean g| = 1.
        let mut g = Graph::new();
        let f = g
            .constant(&Tensor::from_vec(vec![2, 1], vec![1.0, 0.0]).unwrap())
            .unwrap();
        let (node, degenerate) =
            fair_batch_node(&mut g, &f, &[1, -1], FairnessVariant::Signed).unwrap();
        assert!(!degenerate);
        assert!((node.value().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fair_batch_matches_per_example_surrogate() {
        let mut g = Graph::new();
        let fs = vec![0.3, 0.8, 0.1, 0.9, 0.4];
        let zs: Vec<i8> = vec![1, -1, 1, 1, -1];
        let f = g
            .constant(&Tensor::from_vec(vec![5, 1], fs.clone()).unwrap())
            .unwrap();
        let (node, _) = fair_batch_node(&mut g, &f, &zs, FairnessVariant::Signed).unwrap();
        let p1 = 3.0 / 5.0;
        let mean: f64 = fs
            .iter()
            .zip(&zs)
            .map(|(f, z)| fair_g(p1, *z, *f, FairnessVariant::Signed).unwrap())
            .sum::<f64>()
            / 5.0;
        assert!((node.value().unwrap() - mean.abs()).abs() < 1e-12);
    }

    #[test]
    fn fair_loss_doubles_on_identical_batches() {
        let clf = classifier(7);
        let b = batch(16, 4);
        let whole = loss_fair(&clf, &b, &b, FairnessVariant::Signed).unwrap();
        // Both halves are computed from bitwise-identical forward passes.
        let mut g = Graph::new();
        let probs = probs_node(&mut g, &clf, &clf.params, &b).unwrap();
        let f = g.slice_last(&probs, 1, 2).unwrap();
        let zs: Vec<i8> = b.iter().map(|e| e.z).collect();
        let (term, _) = fair_batch_node(&mut g, &f, &zs, FairnessVariant::Signed).unwrap();
        assert_eq!(whole.value, 2.0 * term.value().unwrap());
    }

    #[test]
    fn fair_loss_constant_predictor_is_exactly_zero() {
        let clf = zeroed_head(classifier(8));
        let b = batch(32, 5);
        let loss = loss_fair(&clf, &b, &b, FairnessVariant::Signed).unwrap();
        assert_eq!(loss.value, 0.0);
    }

    #[test]
    fn single_group_batch_downgrades_to_zero_with_warning() {
        let clf = classifier(9);
        let mut b = batch(16, 6);
        for ex in &mut b {
            ex.z = 1;
        }
        let loss = loss_fair(&clf, &b, &b, FairnessVariant::Signed).unwrap();
        assert_eq!(loss.value, 0.0);
        assert_eq!(loss.degenerate_batches, 2);
    }

    #[test]
    fn total_reduces_to_cls_at_zero_duals() {
        let clf = classifier(10);
        let b = batch(16, 7);
        let aug = batch(16, 8);
        let duals = DualState::new(0.0, 0.0, 0.05, 0.05, 0.0).unwrap();
        let total = loss_total(&clf, &b, &aug, &duals, FairnessVariant::Signed).unwrap();
        let cls = loss_cls(&clf, &b).unwrap();
        assert_eq!(total, cls);
    }

    #[test]
    fn total_equals_component_sum() {
        let clf = classifier(11);
        let b = batch(16, 9);
        let aug = batch(16, 10);
        let duals = DualState::new(0.7, 1.3, 0.05, 0.05, 0.01).unwrap();
        let total = loss_total(&clf, &b, &aug, &duals, FairnessVariant::Signed).unwrap();
        let manual = loss_cls(&clf, &b).unwrap()
            + 0.7 * loss_inv(&clf, &b, &aug).unwrap()
            + 1.3 * loss_fair(&clf, &b, &aug, FairnessVariant::Signed)
                .unwrap()
                .value;
        assert!((total - manual).abs() < 1e-12);
    }

    #[test]
    fn dual_update_worked_examples() {
        let d = DualState::new(0.0, 0.1, 0.2, 0.5, 1.0).unwrap();
        let updated = dual_update(&d, 0.5, 0.0);
        assert!((updated.lambda_inv - 0.3).abs() < 1e-15);
        assert_eq!(updated.lambda_fair, 0.0); // max(0.1 + (0 - 0.5), 0)
    }

    #[test]
    fn dual_update_fixed_point() {
        let d = DualState::new(0.4, 0.8, 0.2, 0.5, 1.0).unwrap();
        let updated = dual_update(&d, 0.2, 0.5);
        assert_eq!(updated.lambda_inv, 0.4);
        assert_eq!(updated.lambda_fair, 0.8);
    }

    #[test]
    fn logit_shift_leaves_everything_unchanged() {
        // Softmax is shift invariant, so adding a constant to the final bias
        // changes no loss.
        let clf = classifier(12);
        let mut shifted = clf.clone();
        let name = "clf.b3";
        let mut bias = shifted.params.get(name).unwrap().detached();
        for v in bias.data_mut() {
            *v += 3.7;
        }
        shifted.params.insert(name.to_string(), bias);
        let b = batch(16, 11);
        let aug = batch(16, 12);
        let duals = DualState::new(0.5, 0.5, 0.05, 0.05, 0.01).unwrap();
        for variant in [FairnessVariant::Signed, FairnessVariant::Literal] {
            let a = loss_total(&clf, &b, &aug, &duals, variant).unwrap();
            let s = loss_total(&shifted, &b, &aug, &duals, variant).unwrap();
            assert_eq!(a, s);
        }
    }

    #[test]
    fn adapt_with_zero_lr_is_identity() {
        let clf = classifier(13);
        let model = stage1_model(14);
        let b = batch(16, 13);
        let hp = MetaHyper {
            inner_lr: 0.0,
            ..Default::default()
        };
        let duals = hp.duals().unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        let (params, _) =
            adapt_on_batch(&clf, &b, &duals, Some(&model), &hp, &mut rng).unwrap();
        assert!(params.bits_eq(&clf.params));
    }

    #[test]
    fn scalar_quadratic_one_step_sgd() {
        // Inner-loop plumbing sanity on a degenerate one-parameter model:
        // L = theta^2, theta = 1, one sgd step at 0.1 gives 0.8.
        let mut g = Graph::new();
        let theta = Tensor::scalar(1.0);
        let p = g.param("theta", &theta).unwrap();
        let sq = g.mul(&p, &p).unwrap();
        let loss = g.sum(&sq).unwrap();
        let grads = g.backward(&loss).unwrap();
        let mut store = ParamStore::new();
        store.insert("theta".into(), theta);
        let mut opt = Optimizer::sgd(0.1).unwrap();
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get("theta").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn meta_train_zero_iters_is_identity() {
        let mut clf = classifier(15);
        let before = clf.params.clone();
        let model = stage1_model(16);
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 100, 17).unwrap();
        let hp = MetaHyper {
            meta_iters: 0,
            ..Default::default()
        };
        let out = meta_train(&mut clf, &data, &model, &hp).unwrap();
        assert!(out.history.is_empty());
        assert!(clf.params.bits_eq(&before));
    }

    #[test]
    fn meta_train_is_deterministic() {
        let model = stage1_model(18);
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 120, 19).unwrap();
        let hp = MetaHyper {
            meta_iters: 3,
            tasks_per_iter: 2,
            support_size: 8,
            query_size: 8,
            inner_steps: 2,
            seed: 5,
            ..Default::default()
        };
        let mut a = classifier(20);
        let out_a = meta_train(&mut a, &data, &model, &hp).unwrap();
        let mut b = classifier(20);
        let out_b = meta_train(&mut b, &data, &model, &hp).unwrap();
        assert!(a.params.bits_eq(&b.params));
        assert_eq!(out_a.history, out_b.history);
    }

    #[test]
    fn ablation_no_augment_has_zero_invariance() {
        let model = stage1_model(21);
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 120, 22).unwrap();
        let hp = MetaHyper {
            meta_iters: 3,
            tasks_per_iter: 2,
            support_size: 8,
            query_size: 8,
            inner_steps: 2,
            seed: 6,
            ..Default::default()
        };
        let mut clf = classifier(23);
        let out = run_ablation(AblationKind::NoAugment, &mut clf, &data, &model, &hp).unwrap();
        for rec in &out.history {
            assert_eq!(rec.query_inv, 0.0);
        }
    }

    #[test]
    fn ablation_no_inner_keeps_task_params_at_meta_params() {
        let model = stage1_model(24);
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 120, 25).unwrap();
        let hp = MetaHyper {
            meta_iters: 3,
            tasks_per_iter: 2,
            support_size: 8,
            query_size: 8,
            inner_steps: 2,
            seed: 7,
            ..Default::default()
        };
        let mut clf = classifier(26);
        let out = run_ablation(AblationKind::NoInnerLoop, &mut clf, &data, &model, &hp).unwrap();
        for rec in &out.history {
            assert_eq!(rec.inner_delta, 0.0);
        }
    }

    #[test]
    fn downstream_identity_under_zero_lr_and_determinism() {
        let clf = classifier(27);
        let model = stage1_model(28);
        let b = batch(32, 29);
        let mut hp = MetaHyper::default();
        hp.inner_lr = 0.0;
        let duals = hp.duals().unwrap();
        let (p1, _) = adapt_downstream(&clf, &b, Some(&model), &hp, &duals).unwrap();
        assert!(p1.bits_eq(&clf.params));
        hp.inner_lr = 1e-3;
        let (p2, _) = adapt_downstream(&clf, &b, Some(&model), &hp, &duals).unwrap();
        let (p3, _) = adapt_downstream(&clf, &b, Some(&model), &hp, &duals).unwrap();
        assert!(p2.bits_eq(&p3));
        assert!(!p2.bits_eq(&clf.params));
    }

    #[test]
    fn erm_zero_steps_is_untrained() {
        let mut clf = classifier(30);
        let before = clf.params.clone();
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 50, 31).unwrap();
        let hp = ErmHyper {
            steps: 0,
            ..Default::default()
        };
        let duals = DualState::new(0.0, 0.0, 0.05, 0.05, 0.01).unwrap();
        let out = train_erm(&mut clf, &data, &hp, false, &duals, FairnessVariant::Signed).unwrap();
        assert!(out.history.is_empty());
        assert!(clf.params.bits_eq(&before));
    }

    #[test]
    fn erm_learns_a_separable_toy_set() {
        // Two clearly separated clusters in two features.
        let mut examples = Vec::new();
        let mut rng = StdRng::seed_from_u64(1);
        for i in 0..200 {
            let y = (i % 2) as u8;
            let center = if y == 1 { 2.0 } else { -2.0 };
            let x: Vec<f64> = (0..2)
                .map(|_| center + 0.3 * rand::Rng::gen_range(&mut rng, -1.0..1.0))
                .collect();
            let z = if i % 4 < 2 { 1 } else { -1 };
            examples.push(Example::new(x, z, y));
        }
        let ds = DomainDataset::new("toy".into(), 2, examples).unwrap();
        let mut clf = ClassifierParams::new(2, 8, 2);
        let hp = ErmHyper {
            steps: 500,
            batch: 32,
            lr: 1e-2,
            snapshot_every: 0,
            seed: 3,
        };
        let duals = DualState::new(0.0, 0.0, 0.05, 0.05, 0.01).unwrap();
        train_erm(&mut clf, &[ds.clone()], &hp, false, &duals, FairnessVariant::Signed).unwrap();
        let acc = accuracy(&clf, &ds.examples).unwrap();
        assert!(acc >= 0.95, "train accuracy {acc}");
    }

    #[test]
    fn erm_fc_with_frozen_zero_dual_matches_plain_erm() {
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 100, 33).unwrap();
        let hp = ErmHyper {
            steps: 20,
            batch: 16,
            lr: 1e-3,
            snapshot_every: 0,
            seed: 4,
        };
        let frozen = DualState::new(0.0, 0.0, 0.05, 0.05, 0.0).unwrap();
        let mut plain = classifier(34);
        let out_plain =
            train_erm(&mut plain, &data, &hp, false, &frozen, FairnessVariant::Signed).unwrap();
        let mut constrained = classifier(34);
        let out_fc =
            train_erm(&mut constrained, &data, &hp, true, &frozen, FairnessVariant::Signed)
                .unwrap();
        assert!(plain.params.bits_eq(&constrained.params));
        for (a, b) in out_plain.history.iter().zip(&out_fc.history) {
            assert_eq!(a.cls, b.cls);
        }
    }

    #[test]
    fn eval_tagged_examples_rejected_everywhere() {
        let mut clf = classifier(35);
        let model = stage1_model(36);
        let spec = SynthSpec::default_demo();
        let mut data = generate_synthetic(&spec, 50, 37).unwrap();
        data[1].examples[3].eval_only = true;
        let hp = MetaHyper {
            meta_iters: 1,
            tasks_per_iter: 1,
            support_size: 4,
            query_size: 4,
            inner_steps: 1,
            ..Default::default()
        };
        assert!(matches!(
            meta_train(&mut clf, &data, &model, &hp),
            Err(MetaError::EvalLeak { .. })
        ));
        let erm_hp = ErmHyper::default();
        let duals = DualState::new(0.0, 0.0, 0.05, 0.05, 0.01).unwrap();
        assert!(matches!(
            train_erm(&mut clf, &data, &erm_hp, false, &duals, FairnessVariant::Signed),
            Err(MetaError::EvalLeak { .. })
        ));
    }
}
