//! Dataset model: examples, domains, synthetic generation with a known
//! latent structure, CSV ingestion, feature normalization, and
//! support/query task sampling.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("missing column `{0}` in csv header")]
    MissingColumn(String),
    #[error("row {row}: cannot parse `{value}` as a number for column `{column}`")]
    BadFloat {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: {column} value {value} outside its two-value set")]
    BadLabel {
        row: usize,
        column: String,
        value: String,
    },
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("empty training pool")]
    EmptyTrainPool,
    #[error("need {need} examples per task but source `{pool}` has {have}")]
    InsufficientExamples {
        pool: String,
        need: usize,
        have: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// One record: features, sensitive label in {-1, +1}, class label in {0, 1}.
/// `domain` is an evaluation-only tag. `eval_only` marks records belonging to
/// a held-out evaluation split; training entry points refuse them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub z: i8,
    pub y: u8,
    pub domain: Option<String>,
    #[serde(default)]
    pub eval_only: bool,
}

impl Example {
    pub fn new(x: Vec<f64>, z: i8, y: u8) -> Self {
        debug_assert!(z == -1 || z == 1);
        debug_assert!(y <= 1);
        Self {
            x,
            z,
            y,
            domain: None,
            eval_only: false,
        }
    }

    /// Class index of the sensitive label: -1 -> 0, +1 -> 1.
    pub fn z_class(&self) -> usize {
        if self.z > 0 {
            1
        } else {
            0
        }
    }
}

/// Ground-truth latents kept alongside synthetic examples. Oracle-only:
/// no training code reads this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTruth {
    pub content: Vec<Vec<f64>>,
    pub style: Vec<Vec<f64>>,
    pub sensitive: Vec<Vec<f64>>,
    /// Label-generating weight vector, identical across domains.
    pub label_weights: Vec<f64>,
    pub label_noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: String,
    pub dim: usize,
    pub examples: Vec<Example>,
    /// True when the dataset holds a single sensitive group.
    pub single_group: bool,
    pub truth: Option<DomainTruth>,
}

impl DomainDataset {
    pub fn new(
        domain: String,
        dim: usize,
        examples: Vec<Example>,
    ) -> Result<Self, DataError> {
        for ex in &examples {
            if ex.x.len() != dim {
                return Err(DataError::DimensionMismatch {
                    expected: dim,
                    got: ex.x.len(),
                });
            }
        }
        let has_neg = examples.iter().any(|e| e.z == -1);
        let has_pos = examples.iter().any(|e| e.z == 1);
        Ok(Self {
            domain,
            dim,
            examples,
            single_group: !(has_neg && has_pos),
            truth: None,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// A meta-learning task: disjoint support and query batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub support: Vec<Example>,
    pub query: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskMode {
    /// Draw both halves from the union of training domains, ignoring tags.
    Pooled,
    /// Draw each task from a single domain.
    PerDomain,
}

/// Synthetic benchmark description realizing a content/style/sensitive
/// latent structure with per-domain label-sensitive correlation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub content_dim: usize,
    pub style_dim: usize,
    pub sensitive_dim: usize,
    pub feature_dim: usize,
    pub domains: usize,
    /// Per-domain style mean vectors, each of length `style_dim`.
    pub style_means: Vec<Vec<f64>>,
    /// Per-domain correlation between class and sensitive label, in [0, 1].
    pub label_corr: Vec<f64>,
    pub mixing_seed: u64,
    /// Label noise scale (also used, attenuated, for observation noise).
    pub noise: f64,
}

/// Norm of the sensitive-group mean separation planted in the `a` factor.
/// Large enough that the sensitive label is cleanly readable from features.
const SENSITIVE_SEPARATION: f64 = 2.5;
/// Observation noise is this fraction of `noise`.
const OBSERVATION_NOISE_FACTOR: f64 = 0.2;
/// Norm of the label weight vector. Together with the label noise this sets
/// the accuracy ceiling of a content-only classifier (about 0.78 at the
/// defaults), below the in-domain accuracy of the sensitive shortcut on
/// strongly correlated domains.
const LABEL_MARGIN_NORM: f64 = 0.6;

impl SynthSpec {
    /// The default three-domain benchmark: correlation ladder 0.9/0.7/0.0,
    /// latent dims (8, 4, 4) mixed into 20 features.
    pub fn default_demo() -> Self {
        let mixing_seed = 0x5eed_f00d;
        let mut rng = StdRng::seed_from_u64(mixing_seed ^ 0x57_11e5);
        let style_means = (0..3)
            .map(|_| (0..4).map(|_| 2.0 * normal(&mut rng)).collect())
            .collect();
        Self {
            content_dim: 8,
            style_dim: 4,
            sensitive_dim: 4,
            feature_dim: 20,
            domains: 3,
            style_means,
            label_corr: vec![0.9, 0.7, 0.0],
            mixing_seed,
            noise: 0.5,
        }
    }

    /// Same structure with seeded style means, for configurable domain counts.
    pub fn with_seeded_style_means(
        content_dim: usize,
        style_dim: usize,
        sensitive_dim: usize,
        feature_dim: usize,
        label_corr: Vec<f64>,
        mixing_seed: u64,
        noise: f64,
        style_scale: f64,
    ) -> Self {
        let mut rng = StdRng::seed_from_u64(mixing_seed ^ 0x57_11e5);
        let style_means = (0..label_corr.len())
            .map(|_| {
                (0..style_dim)
                    .map(|_| style_scale * normal(&mut rng))
                    .collect()
            })
            .collect();
        Self {
            content_dim,
            style_dim,
            sensitive_dim,
            feature_dim,
            domains: label_corr.len(),
            style_means,
            label_corr,
            mixing_seed,
            noise,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.content_dim + self.style_dim + self.sensitive_dim
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.feature_dim < self.latent_dim() {
            return Err(DataError::BadSpec(format!(
                "feature_dim {} must be at least content+style+sensitive = {}",
                self.feature_dim,
                self.latent_dim()
            )));
        }
        if self.domains < 3 {
            return Err(DataError::BadSpec(format!(
                "need at least 3 domains, got {}",
                self.domains
            )));
        }
        if self.label_corr.len() != self.domains || self.style_means.len() != self.domains {
            return Err(DataError::BadSpec(
                "per-domain fields must match the domain count".into(),
            ));
        }
        if self.label_corr.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(DataError::BadSpec(
                "label-sensitive correlations must lie in [0, 1]".into(),
            ));
        }
        if self.style_means.iter().any(|m| m.len() != self.style_dim) {
            return Err(DataError::BadSpec(
                "style means must have style_dim entries".into(),
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(DataError::BadSpec("noise must be nonnegative".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut StdRng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_vec(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Deterministic stream derivation: one base seed, many labelled streams.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in base.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Structural pieces shared by every domain of one synthetic benchmark.
struct SynthStructure {
    mixing: Vec<Vec<f64>>,  // feature_dim x latent_dim
    label_weights: Vec<f64>, // unit norm, content_dim
    sensitive_mean: Vec<f64>, // sensitive_dim, norm SENSITIVE_SEPARATION
}

fn synth_structure(spec: &SynthSpec) -> SynthStructure {
    let mut rng = StdRng::seed_from_u64(spec.mixing_seed);
    let latent = spec.latent_dim();
    let scale = 1.0 / (latent as f64).sqrt();
    let mixing = (0..spec.feature_dim)
        .map(|_| (0..latent).map(|_| scale * normal(&mut rng)).collect())
        .collect();
    let mut w = normal_vec(&mut rng, spec.content_dim);
    let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut w {
        *v *= LABEL_MARGIN_NORM / nw;
    }
    let mut mu = normal_vec(&mut rng, spec.sensitive_dim);
    let nm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut mu {
        *v *= SENSITIVE_SEPARATION / nm;
    }
    SynthStructure {
        mixing,
        label_weights: w,
        sensitive_mean: mu,
    }
}

/// Generate the synthetic benchmark. The label-given-content law (weights,
/// noise) is built once and shared by every domain; only style means and the
/// label-sensitive correlation differ across domains.
pub fn generate_synthetic(
    spec: &SynthSpec,
    per_domain: usize,
    seed: u64,
) -> Result<Vec<DomainDataset>, DataError> {
    spec.validate()?;
    let st = synth_structure(spec);
    let mut out = Vec::with_capacity(spec.domains);
    for e in 0..spec.domains {
        let mut rng = StdRng::seed_from_u64(derive_seed(seed, &format!("synth.domain.{e}")));
        let rho = spec.label_corr[e];
        let keep_prob = (1.0 + rho) / 2.0;
        let mut examples = Vec::with_capacity(per_domain);
        let mut contents = Vec::with_capacity(per_domain);
        let mut styles = Vec::with_capacity(per_domain);
        let mut sensitives = Vec::with_capacity(per_domain);
        for _ in 0..per_domain {
            let c = normal_vec(&mut rng, spec.content_dim);
            let s: Vec<f64> = spec.style_means[e]
                .iter()
                .map(|m| m + normal(&mut rng))
                .collect();
            let margin: f64 = st
                .label_weights
                .iter()
                .zip(&c)
                .map(|(w, cv)| w * cv)
                .sum();
            let eps = spec.noise * normal(&mut rng);
            let y: u8 = if margin + eps > 0.0 { 1 } else { 0 };
            let aligned: i8 = if y == 1 { 1 } else { -1 };
            let z: i8 = if rng.gen::<f64>() < keep_prob {
                aligned
            } else {
                -aligned
            };
            let a: Vec<f64> = st
                .sensitive_mean
                .iter()
                .map(|m| (z as f64) * m + normal(&mut rng))
                .collect();
            let mut latent = Vec::with_capacity(spec.latent_dim());
            latent.extend_from_slice(&c);
            latent.extend_from_slice(&s);
            latent.extend_from_slice(&a);
            let obs_noise = spec.noise * OBSERVATION_NOISE_FACTOR;
            let x: Vec<f64> = st
                .mixing
                .iter()
                .map(|row| {
                    row.iter().zip(&latent).map(|(m, l)| m * l).sum::<f64>()
                        + obs_noise * normal(&mut rng)
                })
                .collect();
            let mut ex = Example::new(x, z, y);
            ex.domain = Some(format!("d{e}"));
            examples.push(ex);
            contents.push(c);
            styles.push(s);
            sensitives.push(a);
        }
        let mut ds = DomainDataset::new(format!("d{e}"), spec.feature_dim, examples)?;
        ds.truth = Some(DomainTruth {
            content: contents,
            style: styles,
            sensitive: sensitives,
            label_weights: st.label_weights.clone(),
            label_noise: spec.noise,
        });
        out.push(ds);
    }
    Ok(out)
}

/// Column roles for CSV ingestion: `role:name` pairs, comma separated.
/// Roles: feature, sensitive, label, domain.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub sensitive: String,
    pub label: String,
    pub domain: Option<String>,
}

impl CsvSchema {
    pub fn parse(spec: &str) -> Result<Self, DataError> {
        let mut features = Vec::new();
        let mut sensitive = None;
        let mut label = None;
        let mut domain = None;
        for part in spec.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (role, name) = part.split_once(':').ok_or_else(|| {
                DataError::Schema(format!("`{part}` is not a role:name pair"))
            })?;
            let name = name.trim().to_string();
            match role.trim() {
                "feature" => features.push(name),
                "sensitive" => {
                    if sensitive.replace(name).is_some() {
                        return Err(DataError::Schema("duplicate sensitive column".into()));
                    }
                }
                "label" => {
                    if label.replace(name).is_some() {
                        return Err(DataError::Schema("duplicate label column".into()));
                    }
                }
                "domain" => {
                    if domain.replace(name).is_some() {
                        return Err(DataError::Schema("duplicate domain column".into()));
                    }
                }
                other => {
                    return Err(DataError::Schema(format!("unknown role `{other}`")));
                }
            }
        }
        let sensitive = sensitive.ok_or_else(|| {
            DataError::Schema("schema must name a sensitive column".into())
        })?;
        let label =
            label.ok_or_else(|| DataError::Schema("schema must name a label column".into()))?;
        if features.is_empty() {
            return Err(DataError::Schema(
                "schema must name at least one feature column".into(),
            ));
        }
        Ok(Self {
            features,
            sensitive,
            label,
            domain,
        })
    }

    /// Schema string for a dataset written by `write_csv`.
    pub fn for_feature_count(dim: usize, with_domain: bool) -> String {
        let mut parts: Vec<String> = (0..dim).map(|i| format!("feature:f{i}")).collect();
        parts.push("sensitive:z".into());
        parts.push("label:y".into());
        if with_domain {
            parts.push("domain:domain".into());
        }
        parts.join(",")
    }
}

/// Load a CSV file. Header row required; `z` values in {0,1} or {-1,1} are
/// normalized to {-1,+1}; `y` must be in {0,1}.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<DomainDataset, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::Schema("empty file: header row required".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let col_index = |name: &str| -> Result<usize, DataError> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let feature_idx: Vec<usize> = schema
        .features
        .iter()
        .map(|f| col_index(f))
        .collect::<Result<_, _>>()?;
    let z_idx = col_index(&schema.sensitive)?;
    let y_idx = col_index(&schema.label)?;
    let domain_idx = match &schema.domain {
        Some(d) => Some(col_index(d)?),
        None => None,
    };

    let mut examples = Vec::new();
    for (row_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let row = row_no + 2; // 1-based, after header
        let get = |idx: usize, column: &str| -> Result<&str, DataError> {
            fields
                .get(idx)
                .copied()
                .ok_or_else(|| DataError::MissingColumn(column.to_string()))
        };
        let mut x = Vec::with_capacity(feature_idx.len());
        for (fi, name) in feature_idx.iter().zip(&schema.features) {
            let raw = get(*fi, name)?;
            let v: f64 = raw.parse().map_err(|_| DataError::BadFloat {
                row,
                column: name.clone(),
                value: raw.to_string(),
            })?;
            x.push(v);
        }
        let z_raw = get(z_idx, &schema.sensitive)?;
        let z_val: f64 = z_raw.parse().map_err(|_| DataError::BadFloat {
            row,
            column: schema.sensitive.clone(),
            value: z_raw.to_string(),
        })?;
        let z: i8 = if z_val == 1.0 {
            1
        } else if z_val == 0.0 || z_val == -1.0 {
            -1
        } else {
            return Err(DataError::BadLabel {
                row,
                column: schema.sensitive.clone(),
                value: z_raw.to_string(),
            });
        };
        let y_raw = get(y_idx, &schema.label)?;
        let y_val: f64 = y_raw.parse().map_err(|_| DataError::BadFloat {
            row,
            column: schema.label.clone(),
            value: y_raw.to_string(),
        })?;
        let y: u8 = if y_val == 1.0 {
            1
        } else if y_val == 0.0 {
            0
        } else {
            return Err(DataError::BadLabel {
                row,
                column: schema.label.clone(),
                value: y_raw.to_string(),
            });
        };
        let mut ex = Example::new(x, z, y);
        if let Some(di) = domain_idx {
            ex.domain = Some(get(di, schema.domain.as_deref().unwrap_or("domain"))?.to_string());
        }
        examples.push(ex);
    }
    let dim = schema.features.len();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    DomainDataset::new(name, dim, examples)
}

/// Write a dataset as CSV with columns f0..f{d-1}, z, y[, domain].
pub fn write_csv(dataset: &DomainDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let with_domain = dataset.examples.iter().any(|e| e.domain.is_some());
    let mut buf = String::new();
    for i in 0..dataset.dim {
        buf.push_str(&format!("f{i},"));
    }
    buf.push_str("z,y");
    if with_domain {
        buf.push_str(",domain");
    }
    buf.push('\n');
    for ex in &dataset.examples {
        for v in &ex.x {
            buf.push_str(&format!("{v},"));
        }
        buf.push_str(&format!("{},{}", ex.z, ex.y));
        if with_domain {
            buf.push(',');
            buf.push_str(ex.domain.as_deref().unwrap_or(""));
        }
        buf.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(buf.as_bytes()).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Split one loaded dataset into per-domain datasets by the domain tag.
pub fn split_by_domain(dataset: &DomainDataset) -> Result<Vec<DomainDataset>, DataError> {
    let mut groups: BTreeMap<String, Vec<Example>> = BTreeMap::new();
    for ex in &dataset.examples {
        let key = ex.domain.clone().unwrap_or_else(|| "unknown".to_string());
        groups.entry(key).or_default().push(ex.clone());
    }
    groups
        .into_iter()
        .map(|(domain, examples)| DomainDataset::new(domain, dataset.dim, examples))
        .collect()
}

/// Per-feature z-score statistics computed on a pooled training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Features whose training std is below this pass through unscaled.
const SCALER_STD_FLOOR: f64 = 1e-9;

impl FeatureScaler {
    pub fn fit(train: &[DomainDataset]) -> Result<Self, DataError> {
        let total: usize = train.iter().map(|d| d.len()).sum();
        if total == 0 {
            return Err(DataError::EmptyTrainPool);
        }
        let dim = train[0].dim;
        let mut mean = vec![0.0; dim];
        for ds in train {
            for ex in &ds.examples {
                for (m, v) in mean.iter_mut().zip(&ex.x) {
                    *m += v;
                }
            }
        }
        for m in &mut mean {
            *m /= total as f64;
        }
        let mut var = vec![0.0; dim];
        for ds in train {
            for ex in &ds.examples {
                for (s, (v, m)) in var.iter_mut().zip(ex.x.iter().zip(&mean)) {
                    let d = v - m;
                    *s += d * d;
                }
            }
        }
        let std = var.iter().map(|s| (s / total as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn apply_example(&self, ex: &mut Example) {
        for ((v, m), s) in ex.x.iter_mut().zip(&self.mean).zip(&self.std) {
            if *s >= SCALER_STD_FLOOR {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn apply(&self, dataset: &DomainDataset) -> DomainDataset {
        let mut out = dataset.clone();
        for ex in &mut out.examples {
            self.apply_example(ex);
        }
        out
    }
}

/// Z-score all datasets with statistics computed on the training pool only.
pub fn normalize_features(
    train: &[DomainDataset],
    apply_to: &[DomainDataset],
) -> Result<(Vec<DomainDataset>, Vec<DomainDataset>, FeatureScaler), DataError> {
    let scaler = FeatureScaler::fit(train)?;
    let train_out = train.iter().map(|d| scaler.apply(d)).collect();
    let apply_out = apply_to.iter().map(|d| scaler.apply(d)).collect();
    Ok((train_out, apply_out, scaler))
}

/// A seeded random subset of a domain's examples, in shuffled order.
pub fn seeded_subset(ds: &DomainDataset, count: usize, seed: u64) -> Vec<Example> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut StdRng::seed_from_u64(seed));
    order
        .iter()
        .take(count.min(ds.len()))
        .map(|i| ds.examples[*i].clone())
        .collect()
}

/// Sample tasks with disjoint support and query halves.
pub fn sample_tasks(
    pool: &[DomainDataset],
    task_count: usize,
    n_sup: usize,
    n_qry: usize,
    mode: TaskMode,
    seed: u64,
) -> Result<Vec<Task>, DataError> {
    let need = n_sup + n_qry;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(task_count);
    match mode {
        TaskMode::Pooled => {
            let union: Vec<&Example> = pool.iter().flat_map(|d| d.examples.iter()).collect();
            if union.len() < need {
                return Err(DataError::InsufficientExamples {
                    pool: "pooled".into(),
                    need,
                    have: union.len(),
                });
            }
            for _ in 0..task_count {
                let picks = index_sample(&mut rng, union.len(), need);
                let mut support = Vec::with_capacity(n_sup);
                let mut query = Vec::with_capacity(n_qry);
                for (k, idx) in picks.into_iter().enumerate() {
                    if k < n_sup {
                        support.push(union[idx].clone());
                    } else {
                        query.push(union[idx].clone());
                    }
                }
                tasks.push(Task { support, query });
            }
        }
        TaskMode::PerDomain => {
            for ds in pool {
                if ds.len() < need {
                    return Err(DataError::InsufficientExamples {
                        pool: ds.domain.clone(),
                        need,
                        have: ds.len(),
                    });
                }
            }
            for _ in 0..task_count {
                let which = rng.gen_range(0..pool.len());
                let ds = &pool[which];
                let picks = index_sample(&mut rng, ds.len(), need);
                let mut support = Vec::with_capacity(n_sup);
                let mut query = Vec::with_capacity(n_qry);
                for (k, idx) in picks.into_iter().enumerate() {
                    if k < n_sup {
                        support.push(ds.examples[idx].clone());
                    } else {
                        query.push(ds.examples[idx].clone());
                    }
                }
                tasks.push(Task { support, query });
            }
        }
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn zero_correlation_domain_is_uncorrelated() {
        let mut spec = SynthSpec::default_demo();
        spec.label_corr = vec![0.0, 0.0, 0.0];
        let data = generate_synthetic(&spec, 10_000, 99).unwrap();
        let ys: Vec<f64> = data[0]
            .examples
            .iter()
            .map(|e| 2.0 * e.y as f64 - 1.0)
            .collect();
        let zs: Vec<f64> = data[0].examples.iter().map(|e| e.z as f64).collect();
        let r = corr(&ys, &zs);
        assert!(r.abs() < 0.05, "corr was {r}");
    }

    #[test]
    fn full_correlation_forces_alignment() {
        let mut spec = SynthSpec::default_demo();
        spec.label_corr = vec![1.0, 1.0, 1.0];
        let data = generate_synthetic(&spec, 500, 3).unwrap();
        for ds in &data {
            for ex in &ds.examples {
                assert_eq!(ex.z as i32, 2 * ex.y as i32 - 1);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::default_demo();
        let a = generate_synthetic(&spec, 50, 17).unwrap();
        let b = generate_synthetic(&spec, 50, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_law_shared_across_domains() {
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 10, 1).unwrap();
        let w0 = &data[0].truth.as_ref().unwrap().label_weights;
        for ds in &data[1..] {
            let t = ds.truth.as_ref().unwrap();
            assert_eq!(&t.label_weights, w0);
            assert_eq!(t.label_noise, spec.noise);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = SynthSpec::default_demo();
        spec.feature_dim = 4;
        assert!(generate_synthetic(&spec, 10, 1).is_err());
        let mut spec = SynthSpec::default_demo();
        spec.label_corr = vec![0.5, 1.5, 0.0];
        assert!(generate_synthetic(&spec, 10, 1).is_err());
    }

    #[test]
    fn csv_normalizes_zero_one_sensitive_values() {
        let dir = std::env::temp_dir().join("feed_core_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("zy.csv");
        std::fs::write(&path, "a,b,z,y\n0.5,1.0,0,1\n0.25,2.0,1,0\n-1.5,0.5,0,0\n").unwrap();
        let schema = CsvSchema::parse("feature:a,feature:b,sensitive:z,label:y").unwrap();
        let ds = load_csv(&path, &schema).unwrap();
        let zs: Vec<i8> = ds.examples.iter().map(|e| e.z).collect();
        assert_eq!(zs, vec![-1, 1, -1]);
        assert_eq!(ds.examples[0].x, vec![0.5, 1.0]);
    }

    #[test]
    fn csv_missing_label_column_names_it() {
        let dir = std::env::temp_dir().join("feed_core_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("missing.csv");
        std::fs::write(&path, "a,z\n0.5,1\n").unwrap();
        let schema = CsvSchema::parse("feature:a,sensitive:z,label:y").unwrap();
        match load_csv(&path, &schema) {
            Err(DataError::MissingColumn(c)) => assert_eq!(c, "y"),
            other => panic!("expected missing column error, got {other:?}"),
        }
    }

    #[test]
    fn csv_unparseable_float_is_an_error() {
        let dir = std::env::temp_dir().join("feed_core_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("badfloat.csv");
        std::fs::write(&path, "a,z,y\n0.5,1,1\nnope,0,0\n").unwrap();
        let schema = CsvSchema::parse("feature:a,sensitive:z,label:y").unwrap();
        match load_csv(&path, &schema) {
            Err(DataError::BadFloat { row, column, value }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "a");
                assert_eq!(value, "nope");
            }
            other => panic!("expected float error, got {other:?}"),
        }
    }

    #[test]
    fn csv_sensitive_outside_two_value_set_is_an_error() {
        let dir = std::env::temp_dir().join("feed_core_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("badz.csv");
        std::fs::write(&path, "a,z,y\n0.5,2,1\n").unwrap();
        let schema = CsvSchema::parse("feature:a,sensitive:z,label:y").unwrap();
        assert!(matches!(
            load_csv(&path, &schema),
            Err(DataError::BadLabel { .. })
        ));
    }

    #[test]
    fn per_domain_tasks_stay_within_one_domain() {
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 60, 8).unwrap();
        let tasks = sample_tasks(&data, 12, 6, 6, TaskMode::PerDomain, 3).unwrap();
        for t in &tasks {
            let tag = t.support[0].domain.clone();
            for ex in t.support.iter().chain(&t.query) {
                assert_eq!(ex.domain, tag);
            }
        }
    }

    #[test]
    fn csv_roundtrip_preserves_examples() {
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 40, 5).unwrap();
        let dir = std::env::temp_dir().join("feed_core_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        write_csv(&data[0], &path).unwrap();
        let schema =
            CsvSchema::parse(&CsvSchema::for_feature_count(spec.feature_dim, true)).unwrap();
        let loaded = load_csv(&path, &schema).unwrap();
        assert_eq!(loaded.examples.len(), data[0].examples.len());
        for (a, b) in loaded.examples.iter().zip(&data[0].examples) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.z, b.z);
            assert_eq!(a.y, b.y);
            assert_eq!(a.domain, b.domain);
        }
    }

    #[test]
    fn constant_feature_passes_through_unscaled() {
        let examples: Vec<Example> = (0..10)
            .map(|i| Example::new(vec![3.0, i as f64], if i % 2 == 0 { 1 } else { -1 }, 0))
            .collect();
        let ds = DomainDataset::new("t".into(), 2, examples).unwrap();
        let (train, _, _) = normalize_features(&[ds], &[]).unwrap();
        for ex in &train[0].examples {
            assert_eq!(ex.x[0], 3.0);
        }
    }

    #[test]
    fn normalized_train_mean_is_zero() {
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 200, 11).unwrap();
        let (train, _, _) = normalize_features(&data[..2], &data[2..]).unwrap();
        let dim = train[0].dim;
        let total: usize = train.iter().map(|d| d.len()).sum();
        for j in 0..dim {
            let mean: f64 = train
                .iter()
                .flat_map(|d| d.examples.iter())
                .map(|e| e.x[j])
                .sum::<f64>()
                / total as f64;
            assert!(mean.abs() < 1e-9, "feature {j} mean {mean}");
        }
    }

    #[test]
    fn held_out_uses_train_statistics() {
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 200, 11).unwrap();
        let (_, applied, scaler) = normalize_features(&data[..2], &data[2..]).unwrap();
        // The held-out domain keeps a nonzero mean under train statistics.
        let own = FeatureScaler::fit(&data[2..]).unwrap();
        assert_ne!(own.mean, scaler.mean);
        let ex0 = &data[2].examples[0];
        let mut manual = ex0.clone();
        scaler.apply_example(&mut manual);
        assert_eq!(applied[0].examples[0].x, manual.x);
    }

    #[test]
    fn tasks_have_declared_sizes_and_disjoint_halves() {
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 100, 2).unwrap();
        let tasks = sample_tasks(&data[..1], 10, 8, 8, TaskMode::Pooled, 5).unwrap();
        assert_eq!(tasks.len(), 10);
        for t in &tasks {
            assert_eq!(t.support.len(), 8);
            assert_eq!(t.query.len(), 8);
            for s in &t.support {
                assert!(!t.query.iter().any(|q| q == s), "support/query overlap");
            }
        }
    }

    #[test]
    fn zero_tasks_gives_empty_list() {
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 100, 2).unwrap();
        let tasks = sample_tasks(&data, 0, 8, 8, TaskMode::Pooled, 5).unwrap();
        assert!(tasks.is_empty());
    }

    #[test]
    fn task_sampling_is_deterministic() {
        let spec = SynthSpec::default_demo();
        let data = generate_synthetic(&spec, 100, 2).unwrap();
        let a = sample_tasks(&data, 6, 4, 4, TaskMode::PerDomain, 5).unwrap();
        let b = sample_tasks(&data, 6, 4, 4, TaskMode::PerDomain, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_examples_is_an_error() {
        let examples: Vec<Example> = (0..4)
            .map(|i| Example::new(vec![i as f64], if i % 2 == 0 { 1 } else { -1 }, 0))
            .collect();
        let ds = DomainDataset::new("tiny".into(), 1, examples).unwrap();
        assert!(matches!(
            sample_tasks(&[ds], 1, 4, 4, TaskMode::Pooled, 1),
            Err(DataError::InsufficientExamples { .. })
        ));
    }
}
