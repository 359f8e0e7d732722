//! Experiment configuration: a line-oriented `key = value` format with `#`
//! comments and dotted keys. Unknown keys are rejected; every numeric field
//! is range-checked.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::data::{CsvSchema, DataError, SynthSpec, TaskMode};
use crate::disentangle::{Stage1Arch, Stage1Hyper};
use crate::meta::{ErmHyper, FairnessVariant, MetaHyper};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    NotFound(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {detail}")]
    BadValue { key: String, detail: String },
    #[error("`{key}` out of range: {detail}")]
    OutOfRange { key: String, detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Feed,
    Erm,
    ErmFc,
    Abs1,
    Abs2,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "feed" => Some(Method::Feed),
            "erm" => Some(Method::Erm),
            "erm_fc" => Some(Method::ErmFc),
            "abs1" => Some(Method::Abs1),
            "abs2" => Some(Method::Abs2),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Feed => "feed",
            Method::Erm => "erm",
            Method::ErmFc => "erm_fc",
            Method::Abs1 => "abs1",
            Method::Abs2 => "abs2",
        }
    }

    /// Methods that train and use the stage-1 transformation model.
    pub fn uses_transform(&self) -> bool {
        matches!(self, Method::Feed | Method::Abs1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic { per_domain: usize },
    Csv { path: PathBuf, schema: String },
}

/// Everything one experiment needs: dataset source, both training stages'
/// hyperparameters, the baseline's, model widths, and harness knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub synth: SynthFields,
    pub stage1: Stage1Hyper,
    pub stage1_dims: Stage1Dims,
    pub stage1_arch: Stage1Arch,
    pub meta: MetaHyper,
    pub erm: ErmHyper,
    pub classifier_hidden: usize,
    pub fewshot: usize,
    pub val_fraction: f64,
    pub select_every: usize,
    pub method: Method,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Synthetic-benchmark knobs as they appear in config files; style means are
/// derived from the mixing seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFields {
    pub content_dim: usize,
    pub style_dim: usize,
    pub sensitive_dim: usize,
    pub feature_dim: usize,
    pub label_corr: Vec<f64>,
    pub mixing_seed: u64,
    pub noise: f64,
    pub style_scale: f64,
}

impl Default for SynthFields {
    fn default() -> Self {
        Self {
            content_dim: 8,
            style_dim: 4,
            sensitive_dim: 4,
            feature_dim: 20,
            label_corr: vec![0.9, 0.7, 0.0],
            mixing_seed: 0x5eed_f00d,
            noise: 0.5,
            style_scale: 2.0,
        }
    }
}

impl SynthFields {
    pub fn to_spec(&self) -> SynthSpec {
        SynthSpec::with_seeded_style_means(
            self.content_dim,
            self.style_dim,
            self.sensitive_dim,
            self.feature_dim,
            self.label_corr.clone(),
            self.mixing_seed,
            self.noise,
            self.style_scale,
        )
    }
}

/// Latent sizes of the stage-1 model (the model's view, independent of how
/// the data was generated).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage1Dims {
    pub semantic: usize,
    pub content: usize,
    pub style: usize,
    pub sensitive: usize,
}

impl Default for Stage1Dims {
    fn default() -> Self {
        Self {
            semantic: 12,
            content: 8,
            style: 4,
            sensitive: 4,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic { per_domain: 1500 },
            synth: SynthFields::default(),
            stage1: Stage1Hyper::default(),
            stage1_dims: Stage1Dims::default(),
            stage1_arch: Stage1Arch::default(),
            meta: MetaHyper::default(),
            erm: ErmHyper::default(),
            classifier_hidden: 32,
            fewshot: 32,
            val_fraction: 0.25,
            select_every: 60,
            method: Method::Feed,
            seed: 7,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_u64(key: &str, value: &str) -> Result<u64, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        detail: format!("`{value}` is not an unsigned integer"),
    })
}

fn parse_usize(key: &str, value: &str) -> Result<usize, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        detail: format!("`{value}` is not an unsigned integer"),
    })
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        detail: format!("`{value}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(ConfigError::BadValue {
            key: key.to_string(),
            detail: "value must be finite".into(),
        });
    }
    Ok(v)
}

fn parse_hidden(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| positive_u(key, parse_usize(key, v.trim())?))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            detail: format!("`{value}` is not true/false"),
        }),
    }
}

fn nonneg(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v < 0.0 {
        return Err(ConfigError::OutOfRange {
            key: key.to_string(),
            detail: format!("{v} must be nonnegative"),
        });
    }
    Ok(v)
}

fn positive_f(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v <= 0.0 {
        return Err(ConfigError::OutOfRange {
            key: key.to_string(),
            detail: format!("{v} must be positive"),
        });
    }
    Ok(v)
}

fn positive_u(key: &str, v: usize) -> Result<usize, ConfigError> {
    if v == 0 {
        return Err(ConfigError::OutOfRange {
            key: key.to_string(),
            detail: "must be positive".into(),
        });
    }
    Ok(v)
}

impl ExperimentConfig {
    /// Parse config text, starting from defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: idx + 1,
                text: raw.to_string(),
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(ConfigError::NotFound(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Apply one `key = value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "dataset.source" => match value {
                "synthetic" => {
                    if !matches!(self.dataset, DatasetSource::Synthetic { .. }) {
                        self.dataset = DatasetSource::Synthetic { per_domain: 1500 };
                    }
                }
                "csv" => {
                    if !matches!(self.dataset, DatasetSource::Csv { .. }) {
                        self.dataset = DatasetSource::Csv {
                            path: PathBuf::new(),
                            schema: String::new(),
                        };
                    }
                }
                _ => {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        detail: format!("`{value}` is not synthetic/csv"),
                    })
                }
            },
            "dataset.per_domain" => {
                let n = positive_u(key, parse_usize(key, value)?)?;
                match &mut self.dataset {
                    DatasetSource::Synthetic { per_domain } => *per_domain = n,
                    _ => {
                        self.dataset = DatasetSource::Synthetic { per_domain: n };
                    }
                }
            }
            "dataset.csv_path" => {
                let p = PathBuf::from(value);
                match &mut self.dataset {
                    DatasetSource::Csv { path, .. } => *path = p,
                    _ => {
                        self.dataset = DatasetSource::Csv {
                            path: p,
                            schema: String::new(),
                        };
                    }
                }
            }
            "dataset.csv_schema" => {
                CsvSchema::parse(value)?;
                match &mut self.dataset {
                    DatasetSource::Csv { schema, .. } => *schema = value.to_string(),
                    _ => {
                        self.dataset = DatasetSource::Csv {
                            path: PathBuf::new(),
                            schema: value.to_string(),
                        };
                    }
                }
            }
            "synth.content_dim" => self.synth.content_dim = positive_u(key, parse_usize(key, value)?)?,
            "synth.style_dim" => self.synth.style_dim = positive_u(key, parse_usize(key, value)?)?,
            "synth.sensitive_dim" => {
                self.synth.sensitive_dim = positive_u(key, parse_usize(key, value)?)?
            }
            "synth.feature_dim" => {
                self.synth.feature_dim = positive_u(key, parse_usize(key, value)?)?
            }
            "synth.rho" => {
                let mut corr = Vec::new();
                for part in value.split(',') {
                    let v = parse_f64(key, part.trim())?;
                    if !(0.0..=1.0).contains(&v) {
                        return Err(ConfigError::OutOfRange {
                            key: key.into(),
                            detail: format!("correlation {v} outside [0, 1]"),
                        });
                    }
                    corr.push(v);
                }
                self.synth.label_corr = corr;
            }
            "synth.mixing_seed" => self.synth.mixing_seed = parse_u64(key, value)?,
            "synth.noise" => self.synth.noise = nonneg(key, parse_f64(key, value)?)?,
            "synth.style_scale" => self.synth.style_scale = nonneg(key, parse_f64(key, value)?)?,
            "stage1.beta_sensitive" => {
                self.stage1.beta_sensitive = nonneg(key, parse_f64(key, value)?)?
            }
            "stage1.beta_adversarial" => {
                self.stage1.beta_adversarial = nonneg(key, parse_f64(key, value)?)?
            }
            "stage1.lr_model" => self.stage1.lr_model = nonneg(key, parse_f64(key, value)?)?,
            "stage1.lr_disc" => self.stage1.lr_disc = nonneg(key, parse_f64(key, value)?)?,
            "stage1.steps" => self.stage1.steps = parse_usize(key, value)?,
            "stage1.batch" => self.stage1.batch = positive_u(key, parse_usize(key, value)?)?,
            "stage1.non_saturating" => self.stage1.non_saturating = parse_bool(key, value)?,
            "stage1.encoder_hidden" => {
                self.stage1_arch.encoder_hidden = parse_hidden(key, value)?
            }
            "stage1.decoder_hidden" => {
                self.stage1_arch.decoder_hidden = parse_hidden(key, value)?
            }
            "stage1.semantic_dim" => {
                self.stage1_dims.semantic = positive_u(key, parse_usize(key, value)?)?
            }
            "stage1.content_dim" => {
                self.stage1_dims.content = positive_u(key, parse_usize(key, value)?)?
            }
            "stage1.style_dim" => {
                self.stage1_dims.style = positive_u(key, parse_usize(key, value)?)?
            }
            "stage1.sensitive_dim" => {
                self.stage1_dims.sensitive = positive_u(key, parse_usize(key, value)?)?
            }
            "meta.inner_lr" => self.meta.inner_lr = nonneg(key, parse_f64(key, value)?)?,
            "meta.meta_lr" => self.meta.meta_lr = nonneg(key, parse_f64(key, value)?)?,
            "meta.inner_steps" => {
                self.meta.inner_steps = positive_u(key, parse_usize(key, value)?)?
            }
            "meta.tasks" => {
                self.meta.tasks_per_iter = positive_u(key, parse_usize(key, value)?)?
            }
            "meta.iters" => self.meta.meta_iters = parse_usize(key, value)?,
            "meta.support" => self.meta.support_size = positive_u(key, parse_usize(key, value)?)?,
            "meta.query" => self.meta.query_size = positive_u(key, parse_usize(key, value)?)?,
            "meta.lambda_inv" => {
                self.meta.lambda_inv_init = nonneg(key, parse_f64(key, value)?)?
            }
            "meta.lambda_fair" => {
                self.meta.lambda_fair_init = nonneg(key, parse_f64(key, value)?)?
            }
            "meta.eta_dual" => self.meta.eta_dual = nonneg(key, parse_f64(key, value)?)?,
            "meta.gamma_inv" => self.meta.gamma_inv = positive_f(key, parse_f64(key, value)?)?,
            "meta.gamma_fair" => self.meta.gamma_fair = positive_f(key, parse_f64(key, value)?)?,
            "meta.variant" => {
                self.meta.variant = match value {
                    "signed" => FairnessVariant::Signed,
                    "literal" => FairnessVariant::Literal,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            detail: format!("`{value}` is not signed/literal"),
                        })
                    }
                }
            }
            "meta.sampling" => {
                self.meta.task_mode = match value {
                    "pooled" => TaskMode::Pooled,
                    "per_domain" => TaskMode::PerDomain,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            detail: format!("`{value}` is not pooled/per_domain"),
                        })
                    }
                }
            }
            "erm.steps" => self.erm.steps = parse_usize(key, value)?,
            "erm.batch" => self.erm.batch = positive_u(key, parse_usize(key, value)?)?,
            "erm.lr" => self.erm.lr = nonneg(key, parse_f64(key, value)?)?,
            "classifier.hidden" => {
                self.classifier_hidden = positive_u(key, parse_usize(key, value)?)?
            }
            "downstream.fewshot" => self.fewshot = positive_u(key, parse_usize(key, value)?)?,
            "select.val_fraction" => {
                let v = parse_f64(key, value)?;
                if !(0.0 < v && v < 1.0) {
                    return Err(ConfigError::OutOfRange {
                        key: key.into(),
                        detail: format!("{v} must lie strictly inside (0, 1)"),
                    });
                }
                self.val_fraction = v;
            }
            "select.every" => self.select_every = parse_usize(key, value)?,
            "method" => {
                self.method = Method::parse(value).ok_or_else(|| ConfigError::BadValue {
                    key: key.into(),
                    detail: format!("`{value}` is not feed/erm/erm_fc/abs1/abs2"),
                })?
            }
            "seed" => self.seed = parse_u64(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let DatasetSource::Csv { path, schema } = &self.dataset {
            if path.as_os_str().is_empty() {
                return Err(ConfigError::BadValue {
                    key: "dataset.csv_path".into(),
                    detail: "required for csv datasets".into(),
                });
            }
            CsvSchema::parse(schema)?;
        }
        if matches!(self.dataset, DatasetSource::Synthetic { .. }) {
            self.synth.to_spec().validate()?;
        }
        Ok(())
    }

    /// Canonical text: every field, sorted, defaults included. The fingerprint
    /// hashes this.
    pub fn canonical_text(&self) -> String {
        let mut pairs: Vec<(String, String)> = Vec::new();
        match &self.dataset {
            DatasetSource::Synthetic { per_domain } => {
                pairs.push(("dataset.source".into(), "synthetic".into()));
                pairs.push(("dataset.per_domain".into(), per_domain.to_string()));
            }
            DatasetSource::Csv { path, schema } => {
                pairs.push(("dataset.source".into(), "csv".into()));
                pairs.push(("dataset.csv_path".into(), path.display().to_string()));
                pairs.push(("dataset.csv_schema".into(), schema.clone()));
            }
        }
        let rho = self
            .synth
            .label_corr
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        pairs.push(("synth.content_dim".into(), self.synth.content_dim.to_string()));
        pairs.push(("synth.style_dim".into(), self.synth.style_dim.to_string()));
        pairs.push((
            "synth.sensitive_dim".into(),
            self.synth.sensitive_dim.to_string(),
        ));
        pairs.push((
            "synth.feature_dim".into(),
            self.synth.feature_dim.to_string(),
        ));
        pairs.push(("synth.rho".into(), rho));
        pairs.push(("synth.mixing_seed".into(), self.synth.mixing_seed.to_string()));
        pairs.push(("synth.noise".into(), self.synth.noise.to_string()));
        pairs.push(("synth.style_scale".into(), self.synth.style_scale.to_string()));
        pairs.push((
            "stage1.beta_sensitive".into(),
            self.stage1.beta_sensitive.to_string(),
        ));
        pairs.push((
            "stage1.beta_adversarial".into(),
            self.stage1.beta_adversarial.to_string(),
        ));
        pairs.push(("stage1.lr_model".into(), self.stage1.lr_model.to_string()));
        pairs.push(("stage1.lr_disc".into(), self.stage1.lr_disc.to_string()));
        pairs.push(("stage1.steps".into(), self.stage1.steps.to_string()));
        pairs.push(("stage1.batch".into(), self.stage1.batch.to_string()));
        pairs.push((
            "stage1.non_saturating".into(),
            self.stage1.non_saturating.to_string(),
        ));
        let hidden = |h: &[usize]| -> String {
            if h.is_empty() {
                "none".into()
            } else {
                h.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            }
        };
        pairs.push((
            "stage1.encoder_hidden".into(),
            hidden(&self.stage1_arch.encoder_hidden),
        ));
        pairs.push((
            "stage1.decoder_hidden".into(),
            hidden(&self.stage1_arch.decoder_hidden),
        ));
        pairs.push((
            "stage1.semantic_dim".into(),
            self.stage1_dims.semantic.to_string(),
        ));
        pairs.push((
            "stage1.content_dim".into(),
            self.stage1_dims.content.to_string(),
        ));
        pairs.push(("stage1.style_dim".into(), self.stage1_dims.style.to_string()));
        pairs.push((
            "stage1.sensitive_dim".into(),
            self.stage1_dims.sensitive.to_string(),
        ));
        pairs.push(("meta.inner_lr".into(), self.meta.inner_lr.to_string()));
        pairs.push(("meta.meta_lr".into(), self.meta.meta_lr.to_string()));
        pairs.push(("meta.inner_steps".into(), self.meta.inner_steps.to_string()));
        pairs.push(("meta.tasks".into(), self.meta.tasks_per_iter.to_string()));
        pairs.push(("meta.iters".into(), self.meta.meta_iters.to_string()));
        pairs.push(("meta.support".into(), self.meta.support_size.to_string()));
        pairs.push(("meta.query".into(), self.meta.query_size.to_string()));
        pairs.push((
            "meta.lambda_inv".into(),
            self.meta.lambda_inv_init.to_string(),
        ));
        pairs.push((
            "meta.lambda_fair".into(),
            self.meta.lambda_fair_init.to_string(),
        ));
        pairs.push(("meta.eta_dual".into(), self.meta.eta_dual.to_string()));
        pairs.push(("meta.gamma_inv".into(), self.meta.gamma_inv.to_string()));
        pairs.push(("meta.gamma_fair".into(), self.meta.gamma_fair.to_string()));
        pairs.push((
            "meta.variant".into(),
            match self.meta.variant {
                FairnessVariant::Signed => "signed".into(),
                FairnessVariant::Literal => "literal".into(),
            },
        ));
        pairs.push((
            "meta.sampling".into(),
            match self.meta.task_mode {
                TaskMode::Pooled => "pooled".into(),
                TaskMode::PerDomain => "per_domain".into(),
            },
        ));
        pairs.push(("erm.steps".into(), self.erm.steps.to_string()));
        pairs.push(("erm.batch".into(), self.erm.batch.to_string()));
        pairs.push(("erm.lr".into(), self.erm.lr.to_string()));
        pairs.push((
            "classifier.hidden".into(),
            self.classifier_hidden.to_string(),
        ));
        pairs.push(("downstream.fewshot".into(), self.fewshot.to_string()));
        pairs.push(("select.val_fraction".into(), self.val_fraction.to_string()));
        pairs.push(("select.every".into(), self.select_every.to_string()));
        pairs.push(("method".into(), self.method.name().to_string()));
        pairs.push(("seed".into(), self.seed.to_string()));
        pairs.push(("out_dir".into(), self.out_dir.display().to_string()));
        pairs.sort();
        let mut text = String::new();
        for (k, v) in pairs {
            let _ = writeln!(text, "{k} = {v}");
        }
        text
    }

    /// FNV-1a over the canonical text.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }

    /// Hyperparameters with the experiment seed folded in.
    pub fn seeded(&self) -> Self {
        let mut cfg = self.clone();
        cfg.stage1.seed = self.seed;
        cfg.meta.seed = self.seed;
        cfg.erm.seed = self.seed;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_roundtrip() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let reparsed = ExperimentConfig::parse(&cfg.canonical_text()).unwrap();
        assert_eq!(reparsed.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn dotted_keys_and_comments() {
        let text = "\n# a comment\nmeta.inner_lr = 0.002  # trailing\nseed = 11\nmethod = erm\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.meta.inner_lr, 0.002);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.method, Method::Erm);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("nonsense.key = 3"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn ranges_validated() {
        assert!(matches!(
            ExperimentConfig::parse("meta.gamma_fair = 0"),
            Err(ConfigError::OutOfRange { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("synth.rho = 0.9,1.5,0"),
            Err(ConfigError::OutOfRange { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("meta.inner_steps = 0"),
            Err(ConfigError::OutOfRange { .. })
        ));
    }

    #[test]
    fn fingerprint_tracks_changes() {
        let a = ExperimentConfig::parse("").unwrap();
        let b = ExperimentConfig::parse("seed = 8").unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn csv_dataset_requires_path() {
        assert!(ExperimentConfig::parse("dataset.source = csv").is_err());
        let ok = ExperimentConfig::parse(
            "dataset.source = csv\ndataset.csv_path = data.csv\ndataset.csv_schema = feature:a,sensitive:z,label:y\n",
        )
        .unwrap();
        assert!(matches!(ok.dataset, DatasetSource::Csv { .. }));
    }
}
