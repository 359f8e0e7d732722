//! Leave-one-domain-out experiment pipeline and result emission.

use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{DatasetSource, ExperimentConfig, Method};
use crate::data::{
    derive_seed, generate_synthetic, load_csv, normalize_features, split_by_domain, CsvSchema,
    DataError, DomainDataset, Example,
};
use crate::disentangle::{
    train_disentangler, DisentangleModel, LatentDims, Stage1Error, Stage1Record,
};
use crate::fairmetrics::{FairReport, MetricOutcome};
use crate::meta::{
    accuracy, adapt_downstream, meta_train, run_ablation, train_erm, AblationKind,
    ClassifierParams, ErmRecord, MetaError, MetaRecord, MetaSnapshot,
};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Stage1(#[from] Stage1Error),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("leave-one-domain-out needs at least 3 domains, got {got}")]
    TooFewDomains { got: usize },
    #[error("no snapshots available for model selection")]
    NoSnapshots,
    #[error("malformed results csv at line {line}")]
    BadResultsCsv { line: usize },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One table row: a method evaluated on one held-out domain.
#[derive(Clone, Debug, PartialEq)]
pub struct LodoRow {
    pub method: String,
    pub held_out: String,
    pub seed: u64,
    pub report: FairReport,
}

/// Per-fold training histories, kept for the history stream.
#[derive(Clone, Debug, Default)]
pub struct FoldHistory {
    pub held_out: String,
    pub stage1: Vec<Stage1Record>,
    pub meta: Vec<MetaRecord>,
    pub erm: Vec<ErmRecord>,
}

#[derive(Clone, Debug)]
pub struct LodoResult {
    pub rows: Vec<LodoRow>,
    pub avg: LodoRow,
    pub histories: Vec<FoldHistory>,
}

/// Load the configured dataset as per-domain datasets.
pub fn load_domains(config: &ExperimentConfig) -> Result<Vec<DomainDataset>, HarnessError> {
    match &config.dataset {
        DatasetSource::Synthetic { per_domain } => {
            let spec = config.synth.to_spec();
            Ok(generate_synthetic(&spec, *per_domain, config.seed)?)
        }
        DatasetSource::Csv { path, schema } => {
            let schema = CsvSchema::parse(schema)?;
            let whole = load_csv(path, &schema)?;
            if schema.domain.is_some() {
                Ok(split_by_domain(&whole)?)
            } else {
                Ok(vec![whole])
            }
        }
    }
}

/// Seeded split of one domain into a training part and a validation part.
fn split_train_val(
    ds: &DomainDataset,
    fraction: f64,
    seed: u64,
) -> Result<(DomainDataset, Vec<Example>), HarnessError> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut StdRng::seed_from_u64(seed));
    let val_count = ((ds.len() as f64 * fraction).ceil() as usize).clamp(1, ds.len() - 1);
    let val: Vec<Example> = order[..val_count]
        .iter()
        .map(|i| ds.examples[*i].clone())
        .collect();
    let train: Vec<Example> = order[val_count..]
        .iter()
        .map(|i| ds.examples[*i].clone())
        .collect();
    let train_ds = DomainDataset::new(ds.domain.clone(), ds.dim, train)?;
    Ok((train_ds, val))
}

/// Seeded split of the held-out domain into a few-shot adaptation slice and
/// the evaluation remainder; the remainder is tagged evaluation-only.
fn split_fewshot(
    ds: &DomainDataset,
    fewshot: usize,
    seed: u64,
) -> Result<(Vec<Example>, DomainDataset), HarnessError> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut StdRng::seed_from_u64(seed));
    let k = fewshot.min(ds.len().saturating_sub(1)).max(1);
    let few: Vec<Example> = order[..k].iter().map(|i| ds.examples[*i].clone()).collect();
    let mut eval: Vec<Example> = order[k..].iter().map(|i| ds.examples[*i].clone()).collect();
    for ex in &mut eval {
        ex.eval_only = true;
    }
    let eval_ds = DomainDataset::new(ds.domain.clone(), ds.dim, eval)?;
    Ok((few, eval_ds))
}

/// Pick the snapshot with the best mean validation accuracy (earliest wins
/// ties).
fn select_snapshot(
    clf: &ClassifierParams,
    snapshots: &[MetaSnapshot],
    val_sets: &[Vec<Example>],
) -> Result<MetaSnapshot, HarnessError> {
    let mut best: Option<(f64, &MetaSnapshot)> = None;
    for snap in snapshots {
        let candidate = clf.with_params(snap.params.clone());
        let mut total = 0.0;
        for set in val_sets {
            total += accuracy(&candidate, set)?;
        }
        let score = total / val_sets.len() as f64;
        let better = match &best {
            Some((best_score, _)) => score > *best_score,
            None => true,
        };
        if better {
            best = Some((score, snap));
        }
    }
    best.map(|(_, s)| s.clone()).ok_or(HarnessError::NoSnapshots)
}

fn snapshot_cadence(total: usize, configured: usize) -> usize {
    if configured > 0 {
        configured
    } else {
        (total / 10).max(1)
    }
}

struct FoldOutcome {
    report: FairReport,
    history: FoldHistory,
}

fn run_fold(
    config: &ExperimentConfig,
    domains: &[DomainDataset],
    held_out_index: usize,
) -> Result<FoldOutcome, HarnessError> {
    let held_raw = &domains[held_out_index];
    let train_raw: Vec<DomainDataset> = domains
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != held_out_index)
        .map(|(_, d)| d.clone())
        .collect();
    let (train_norm, applied, _scaler) =
        normalize_features(&train_raw, std::slice::from_ref(held_raw))?;
    let held_norm = &applied[0];

    let fold_seed = derive_seed(config.seed, &format!("fold.{}", held_raw.domain));
    let mut history = FoldHistory {
        held_out: held_raw.domain.clone(),
        ..Default::default()
    };

    // Per-domain train/validation splits of the training domains.
    let mut train_splits = Vec::with_capacity(train_norm.len());
    let mut val_sets = Vec::with_capacity(train_norm.len());
    for ds in &train_norm {
        let (train_ds, val) = split_train_val(
            ds,
            config.val_fraction,
            derive_seed(fold_seed, &format!("val.{}", ds.domain)),
        )?;
        train_splits.push(train_ds);
        val_sets.push(val);
    }

    let (fewshot, eval_ds) = split_fewshot(
        held_norm,
        config.fewshot,
        derive_seed(fold_seed, "fewshot"),
    )?;

    let dim = held_norm.dim;
    // Stage 1 is needed by the methods that use the transformation model;
    // the no-augment ablation gets an untrained model it never calls.
    let stage1_dims = LatentDims {
        feature: dim,
        semantic: config.stage1_dims.semantic,
        content: config.stage1_dims.content,
        style: config.stage1_dims.style,
        sensitive: config.stage1_dims.sensitive,
    };
    let mut stage1_model = DisentangleModel::new(
        stage1_dims,
        &config.stage1_arch,
        derive_seed(fold_seed, "stage1.model"),
    );
    if config.method.uses_transform() {
        let mut hp = config.stage1.clone();
        hp.seed = derive_seed(fold_seed, "stage1.train");
        history.stage1 = train_disentangler(&mut stage1_model, &train_splits, &hp)?;
    }

    let mut clf = ClassifierParams::new(
        dim,
        config.classifier_hidden,
        derive_seed(fold_seed, "clf.init"),
    );

    let (snapshots, training_duals) = match config.method {
        Method::Feed | Method::Abs1 | Method::Abs2 => {
            let mut hp = config.meta.clone();
            hp.seed = derive_seed(fold_seed, "meta.train");
            hp.snapshot_every = snapshot_cadence(hp.meta_iters, config.select_every);
            let outcome = match config.method {
                Method::Feed => meta_train(&mut clf, &train_splits, &stage1_model, &hp)?,
                Method::Abs1 => run_ablation(
                    AblationKind::NoInnerLoop,
                    &mut clf,
                    &train_splits,
                    &stage1_model,
                    &hp,
                )?,
                _ => run_ablation(
                    AblationKind::NoAugment,
                    &mut clf,
                    &train_splits,
                    &stage1_model,
                    &hp,
                )?,
            };
            history.meta = outcome.history;
            (outcome.snapshots, outcome.duals)
        }
        Method::Erm | Method::ErmFc => {
            let mut hp = config.erm.clone();
            hp.seed = derive_seed(fold_seed, "erm.train");
            hp.snapshot_every = snapshot_cadence(hp.steps, config.select_every);
            let duals = config.meta.duals()?;
            let outcome = train_erm(
                &mut clf,
                &train_splits,
                &hp,
                config.method == Method::ErmFc,
                &duals,
                config.meta.variant,
            )?;
            history.erm = outcome.history;
            (outcome.snapshots, outcome.duals)
        }
    };

    let selected = select_snapshot(&clf, &snapshots, &val_sets)?;
    let selected_clf = clf.with_params(selected.params.clone());

    // Downstream few-shot adaptation for the meta methods; the baselines
    // evaluate the selected parameters directly.
    let final_clf = match config.method {
        Method::Feed | Method::Abs1 | Method::Abs2 => {
            let mut hp = config.meta.clone();
            hp.seed = derive_seed(fold_seed, "downstream");
            let model = if config.method == Method::Abs2 {
                None
            } else {
                Some(&stage1_model)
            };
            let (params, _) =
                adapt_downstream(&selected_clf, &fewshot, model, &hp, &selected.duals)?;
            selected_clf.with_params(params)
        }
        Method::Erm | Method::ErmFc => selected_clf,
    };
    let _ = training_duals;

    let report = crate::fairmetrics::evaluate_model(&final_clf, &eval_ds, 0.5)?;
    Ok(FoldOutcome { report, history })
}

fn average_outcome(values: &[&MetricOutcome]) -> MetricOutcome {
    let present: Vec<f64> = values.iter().filter_map(|m| m.value()).collect();
    if present.is_empty() {
        MetricOutcome::Absent("absent in every domain".into())
    } else {
        MetricOutcome::Value(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Full leave-one-domain-out run of the configured method.
pub fn run_lodo(config: &ExperimentConfig) -> Result<LodoResult, HarnessError> {
    let config = config.seeded();
    let domains = load_domains(&config)?;
    if domains.len() < 3 {
        return Err(HarnessError::TooFewDomains {
            got: domains.len(),
        });
    }

    let mut rows = Vec::with_capacity(domains.len());
    let mut histories = Vec::with_capacity(domains.len());
    for idx in 0..domains.len() {
        let outcome = run_fold(&config, &domains, idx)?;
        rows.push(LodoRow {
            method: config.method.name().to_string(),
            held_out: outcome.report.domain.clone(),
            seed: config.seed,
            report: outcome.report,
        });
        histories.push(outcome.history);
    }

    let avg_report = FairReport {
        domain: "Avg".into(),
        size: rows.iter().map(|r| r.report.size).sum(),
        group_counts: (
            rows.iter().map(|r| r.report.group_counts.0).sum(),
            rows.iter().map(|r| r.report.group_counts.1).sum(),
        ),
        accuracy: rows.iter().map(|r| r.report.accuracy).sum::<f64>() / rows.len() as f64,
        delta_dp: average_outcome(&rows.iter().map(|r| &r.report.delta_dp).collect::<Vec<_>>()),
        delta_eopp: average_outcome(
            &rows.iter().map(|r| &r.report.delta_eopp).collect::<Vec<_>>(),
        ),
        delta_eo: average_outcome(&rows.iter().map(|r| &r.report.delta_eo).collect::<Vec<_>>()),
    };
    let avg = LodoRow {
        method: config.method.name().to_string(),
        held_out: "Avg".into(),
        seed: config.seed,
        report: avg_report,
    };

    Ok(LodoResult {
        rows,
        avg,
        histories,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

pub const RESULTS_CSV_HEADER: &str =
    "method,held_out_domain,accuracy,delta_dp,delta_eopp,delta_eo,seed";

fn csv_line(row: &LodoRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        row.method,
        row.held_out,
        row.report.accuracy,
        row.report.delta_dp.csv_field(),
        row.report.delta_eopp.csv_field(),
        row.report.delta_eo.csv_field(),
        row.seed
    )
}

fn jsonl_value(row: &LodoRow) -> serde_json::Value {
    json!({
        "method": row.method,
        "held_out_domain": row.held_out,
        "accuracy": row.report.accuracy,
        "delta_dp": row.report.delta_dp.value(),
        "delta_eopp": row.report.delta_eopp.value(),
        "delta_eo": row.report.delta_eo.value(),
        "seed": row.seed,
    })
}

/// Write the result table (and, for jsonl, the history stream). Returns the
/// paths written.
pub fn emit_report(
    result: &LodoResult,
    format: ReportFormat,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, HarnessError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let all_rows = result.rows.iter().chain(std::iter::once(&result.avg));
    match format {
        ReportFormat::Csv => {
            let path = dir.join("results.csv");
            let mut text = String::from(RESULTS_CSV_HEADER);
            text.push('\n');
            for row in all_rows {
                text.push_str(&csv_line(row));
                text.push('\n');
            }
            std::fs::write(&path, text).map_err(io_err(&path))?;
            Ok(vec![path])
        }
        ReportFormat::Jsonl => {
            let rows_path = dir.join("results.jsonl");
            let mut text = String::new();
            for row in all_rows {
                text.push_str(&jsonl_value(row).to_string());
                text.push('\n');
            }
            std::fs::write(&rows_path, text).map_err(io_err(&rows_path))?;

            let hist_path = dir.join("history.jsonl");
            let mut text = String::new();
            for fold in &result.histories {
                for rec in &fold.stage1 {
                    let v = json!({
                        "held_out": fold.held_out,
                        "phase": "stage1",
                        "step": rec.step,
                        "recon_total": rec.recon.total,
                        "recon_feature": rec.recon.feature,
                        "sensitive_pred": rec.sensitive_pred,
                        "disc_objective": rec.disc_objective,
                        "gen_objective": rec.gen_objective,
                    });
                    text.push_str(&v.to_string());
                    text.push('\n');
                }
                for rec in &fold.meta {
                    let v = json!({
                        "held_out": fold.held_out,
                        "phase": "meta",
                        "step": rec.iter,
                        "cls": rec.query_cls,
                        "inv": rec.query_inv,
                        "fair": rec.query_fair,
                        "total": rec.query_total,
                        "lambda_inv": rec.lambda_inv,
                        "lambda_fair": rec.lambda_fair,
                    });
                    text.push_str(&v.to_string());
                    text.push('\n');
                }
                for rec in &fold.erm {
                    let v = json!({
                        "held_out": fold.held_out,
                        "phase": "erm",
                        "step": rec.step,
                        "cls": rec.cls,
                        "fair": rec.fair,
                        "lambda_fair": rec.lambda_fair,
                    });
                    text.push_str(&v.to_string());
                    text.push('\n');
                }
            }
            std::fs::write(&hist_path, text).map_err(io_err(&hist_path))?;
            Ok(vec![rows_path, hist_path])
        }
    }
}

/// One parsed row of a results csv.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedRow {
    pub method: String,
    pub held_out: String,
    pub accuracy: f64,
    pub delta_dp: Option<f64>,
    pub delta_eopp: Option<f64>,
    pub delta_eo: Option<f64>,
    pub seed: u64,
}

/// Parse a results csv back into rows.
pub fn parse_report_csv(path: impl AsRef<Path>) -> Result<Vec<ParsedRow>, HarnessError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == RESULTS_CSV_HEADER => {}
        _ => return Err(HarnessError::BadResultsCsv { line: 1 }),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(HarnessError::BadResultsCsv { line: idx + 1 });
        }
        let opt = |s: &str| -> Result<Option<f64>, HarnessError> {
            if s == "NA" {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| HarnessError::BadResultsCsv { line: idx + 1 })
            }
        };
        rows.push(ParsedRow {
            method: fields[0].to_string(),
            held_out: fields[1].to_string(),
            accuracy: fields[2]
                .parse()
                .map_err(|_| HarnessError::BadResultsCsv { line: idx + 1 })?,
            delta_dp: opt(fields[3])?,
            delta_eopp: opt(fields[4])?,
            delta_eo: opt(fields[5])?,
            seed: fields[6]
                .parse()
                .map_err(|_| HarnessError::BadResultsCsv { line: idx + 1 })?,
        });
    }
    Ok(rows)
}

/// Package the nine stage-1 parameter stores into one checkpoint.
pub fn stage1_checkpoint(model: &DisentangleModel, fingerprint: u64) -> Checkpoint {
    let mut ck = Checkpoint::new(model.dims.to_vec(), fingerprint);
    ck.insert_store(&model.model_params);
    ck.insert_store(&model.disc_params);
    ck
}

/// Rebuild the stage-1 model from a checkpoint.
pub fn stage1_from_checkpoint(ck: &Checkpoint) -> Result<DisentangleModel, HarnessError> {
    let dims = LatentDims::from_slice(&ck.dims).ok_or(CheckpointError::BadHeader {
        line: format!("__meta.dims {:?}", ck.dims),
    })?;
    let model_params = ck.store_with_prefixes(&[
        "enc_semantic",
        "enc_style",
        "enc_content",
        "enc_sensitive",
        "dec_inner",
        "dec_outer",
        "sensitive_clf",
    ]);
    let disc_params = ck.store_with_prefixes(&["disc_inner", "disc_outer"]);
    Ok(DisentangleModel::from_stores(dims, model_params, disc_params)?)
}

/// Package classifier parameters into a checkpoint.
pub fn classifier_checkpoint(clf: &ClassifierParams, fingerprint: u64) -> Checkpoint {
    let mut ck = Checkpoint::new(vec![clf.input_dim()], fingerprint);
    ck.insert_store(&clf.params);
    ck
}

/// Rebuild the classifier from a checkpoint.
pub fn classifier_from_checkpoint(ck: &Checkpoint) -> Result<ClassifierParams, HarnessError> {
    Ok(ClassifierParams::from_store(
        ck.store_with_prefixes(&["clf"]),
    )?)
}
