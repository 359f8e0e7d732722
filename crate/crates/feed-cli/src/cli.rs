//! Subcommand dispatch for the `feed` experiment harness.

use std::path::{Path, PathBuf};

use feed_core::config::{DatasetSource, ExperimentConfig, Method};
use feed_core::data::{
    derive_seed, normalize_features, seeded_subset, write_csv, DomainDataset, Example,
};
use feed_core::disentangle::{train_disentangler, DisentangleModel, LatentDims};
use feed_core::fairmetrics::evaluate_model;
use feed_core::lodo::{
    classifier_checkpoint, classifier_from_checkpoint, emit_report, load_domains, run_lodo,
    stage1_checkpoint, stage1_from_checkpoint, LodoResult, ReportFormat, RESULTS_CSV_HEADER,
};
use feed_core::meta::{
    adapt_downstream, meta_train, run_ablation, train_erm, AblationKind, ClassifierParams,
};
use feed_core::checkpoint::{load_checkpoint, save_checkpoint};

pub const USAGE: &str = "usage: feed <command> [options]

commands:
  synth               generate the synthetic benchmark csvs plus a ground-truth sidecar
  train-disentangler  train the stage-1 disentangler and write stage1.ckpt
  meta-train          train the configured method's classifier and write classifier.ckpt
  adapt               few-shot adapt a trained classifier to one domain
  evaluate            evaluate a classifier checkpoint on one domain
  lodo                full leave-one-domain-out run of the configured method
  ablate              leave-one-domain-out runs of both ablations
  help                print this message

options:
  --config PATH       config file (line-oriented `key = value`; defaults used when omitted)
  --set KEY=VALUE     override one config key (repeatable)
  --seed N            override the experiment seed
  --out DIR           override the output directory (FEED_OUT_DIR wins over both)
  --stage1 PATH       stage-1 checkpoint (meta-train, adapt)
  --checkpoint PATH   classifier checkpoint (adapt, evaluate)
  --domain ID         target domain (adapt, evaluate)";

#[derive(Debug)]
pub enum CliError {
    /// Unknown command or flag: usage text, exit 2.
    Usage(String),
    /// Everything else: one-line error, exit 1.
    Runtime(String),
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Default)]
struct CommonArgs {
    config: Option<PathBuf>,
    sets: Vec<(String, String)>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    stage1: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    domain: Option<String>,
}

fn parse_args(args: &[String]) -> Result<CommonArgs, CliError> {
    let mut out = CommonArgs::default();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let mut value = |name: &str| -> Result<String, CliError> {
            it.next()
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("{name} needs a value")))
        };
        match flag.as_str() {
            "--config" => out.config = Some(PathBuf::from(value("--config")?)),
            "--set" => {
                let pair = value("--set")?;
                let (k, v) = pair.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("--set expects KEY=VALUE, got `{pair}`"))
                })?;
                out.sets.push((k.trim().to_string(), v.trim().to_string()));
            }
            "--seed" => {
                out.seed = Some(value("--seed")?.parse().map_err(|_| {
                    CliError::Usage("--seed expects an unsigned integer".into())
                })?)
            }
            "--out" => out.out = Some(PathBuf::from(value("--out")?)),
            "--stage1" => out.stage1 = Some(PathBuf::from(value("--stage1")?)),
            "--checkpoint" => out.checkpoint = Some(PathBuf::from(value("--checkpoint")?)),
            "--domain" => out.domain = Some(value("--domain")?),
            other => return Err(CliError::Usage(format!("unknown flag `{other}`"))),
        }
    }
    Ok(out)
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(runtime)?,
        None => ExperimentConfig::default(),
    };
    for (k, v) in &common.sets {
        cfg.apply(k, v).map_err(runtime)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Ok(dir) = std::env::var("FEED_OUT_DIR") {
        if !dir.is_empty() {
            cfg.out_dir = PathBuf::from(dir);
        }
    }
    cfg.validate().map_err(runtime)?;
    Ok(cfg)
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", cfg.out_dir.display())))
}

/// Load the configured dataset and z-score it on the pooled domains. The
/// lodo pipeline fits its scaler on training domains only; the standalone
/// commands share one scaler across a fixed dataset so checkpoints stay
/// consistent between commands.
fn prepared_domains(cfg: &ExperimentConfig) -> Result<Vec<DomainDataset>, CliError> {
    let raw = load_domains(cfg).map_err(runtime)?;
    let (normalized, _, _) = normalize_features(&raw, &[]).map_err(runtime)?;
    Ok(normalized)
}

fn stage1_dims(cfg: &ExperimentConfig, feature_dim: usize) -> LatentDims {
    LatentDims {
        feature: feature_dim,
        semantic: cfg.stage1_dims.semantic,
        content: cfg.stage1_dims.content,
        style: cfg.stage1_dims.style,
        sensitive: cfg.stage1_dims.sensitive,
    }
}

fn stage1_path(cfg: &ExperimentConfig, common: &CommonArgs) -> PathBuf {
    common
        .stage1
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("stage1.ckpt"))
}

fn classifier_path(cfg: &ExperimentConfig, common: &CommonArgs) -> PathBuf {
    common
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("classifier.ckpt"))
}

fn find_domain<'a>(
    domains: &'a [DomainDataset],
    id: &str,
) -> Result<&'a DomainDataset, CliError> {
    domains
        .iter()
        .find(|d| d.domain == id)
        .ok_or_else(|| runtime(format!("domain `{id}` not in dataset")))
}

fn fewshot_slice(ds: &DomainDataset, count: usize, seed: u64) -> Vec<Example> {
    seeded_subset(ds, count, seed)
}

fn write_jsonl(path: &Path, lines: &[serde_json::Value]) -> Result<(), CliError> {
    let mut text = String::new();
    for v in lines {
        text.push_str(&v.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn run(args: &[String]) -> Result<(), CliError> {
    let Some(command) = args.first() else {
        return Err(CliError::Usage(String::new()));
    };
    let common = parse_args(&args[1..])?;
    match command.as_str() {
        "help" | "-h" | "--help" => {
            println!("{USAGE}");
            Ok(())
        }
        "synth" => cmd_synth(&common),
        "train-disentangler" => cmd_train_disentangler(&common),
        "meta-train" => cmd_meta_train(&common),
        "adapt" => cmd_adapt(&common),
        "evaluate" => cmd_evaluate(&common),
        "lodo" => cmd_lodo(&common),
        "ablate" => cmd_ablate(&common),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

fn cmd_synth(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    ensure_out_dir(&cfg)?;
    let DatasetSource::Synthetic { .. } = cfg.dataset else {
        return Err(runtime("synth requires dataset.source = synthetic"));
    };
    let domains = load_domains(&cfg).map_err(runtime)?;
    for ds in &domains {
        let data_path = cfg.out_dir.join(format!("data_{}.csv", ds.domain));
        write_csv(ds, &data_path).map_err(runtime)?;
        if let Some(truth) = &ds.truth {
            let truth_path = cfg.out_dir.join(format!("truth_{}.csv", ds.domain));
            let mut text = String::new();
            let (dc, dsd, da) = (
                truth.content[0].len(),
                truth.style[0].len(),
                truth.sensitive[0].len(),
            );
            let mut cols: Vec<String> = (0..dc).map(|i| format!("c{i}")).collect();
            cols.extend((0..dsd).map(|i| format!("s{i}")));
            cols.extend((0..da).map(|i| format!("a{i}")));
            text.push_str(&cols.join(","));
            text.push('\n');
            for i in 0..ds.len() {
                let mut row: Vec<String> =
                    truth.content[i].iter().map(|v| v.to_string()).collect();
                row.extend(truth.style[i].iter().map(|v| v.to_string()));
                row.extend(truth.sensitive[i].iter().map(|v| v.to_string()));
                text.push_str(&row.join(","));
                text.push('\n');
            }
            std::fs::write(&truth_path, text)
                .map_err(|e| runtime(format!("{}: {e}", truth_path.display())))?;
        }
        println!("wrote {}", data_path.display());
    }
    if let Some(truth) = domains[0].truth.as_ref() {
        let weights_path = cfg.out_dir.join("truth_label_weights.csv");
        let text = truth
            .label_weights
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        std::fs::write(&weights_path, text + "\n")
            .map_err(|e| runtime(format!("{}: {e}", weights_path.display())))?;
    }
    Ok(())
}

fn cmd_train_disentangler(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(common)?.seeded();
    ensure_out_dir(&cfg)?;
    let domains = prepared_domains(&cfg)?;
    let dim = domains[0].dim;
    let mut model = DisentangleModel::new(
        stage1_dims(&cfg, dim),
        &cfg.stage1_arch,
        derive_seed(cfg.seed, "cli.stage1.model"),
    );
    let history = train_disentangler(&mut model, &domains, &cfg.stage1).map_err(runtime)?;
    let path = cfg.out_dir.join("stage1.ckpt");
    save_checkpoint(&path, &stage1_checkpoint(&model, cfg.fingerprint())).map_err(runtime)?;
    let lines: Vec<serde_json::Value> = history
        .iter()
        .map(|r| serde_json::to_value(r).expect("history record serializes"))
        .collect();
    write_jsonl(&cfg.out_dir.join("stage1_history.jsonl"), &lines)?;
    let last = history.last();
    println!(
        "trained disentangler for {} steps (final recon {:.4}); wrote {}",
        history.len(),
        last.map_or(f64::NAN, |r| r.recon.total),
        path.display()
    );
    Ok(())
}

fn cmd_meta_train(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(common)?.seeded();
    ensure_out_dir(&cfg)?;
    let domains = prepared_domains(&cfg)?;
    let dim = domains[0].dim;
    let mut clf = ClassifierParams::new(
        dim,
        cfg.classifier_hidden,
        derive_seed(cfg.seed, "cli.clf.init"),
    );
    let mut lines: Vec<serde_json::Value> = Vec::new();
    match cfg.method {
        Method::Feed | Method::Abs1 | Method::Abs2 => {
            let model = if cfg.method.uses_transform() {
                stage1_from_checkpoint(&load_checkpoint(stage1_path(&cfg, common)).map_err(runtime)?)
                    .map_err(runtime)?
            } else {
                DisentangleModel::new(
                    stage1_dims(&cfg, dim),
                    &cfg.stage1_arch,
                    derive_seed(cfg.seed, "cli.stage1.model"),
                )
            };
            let outcome = match cfg.method {
                Method::Feed => meta_train(&mut clf, &domains, &model, &cfg.meta),
                Method::Abs1 => {
                    run_ablation(AblationKind::NoInnerLoop, &mut clf, &domains, &model, &cfg.meta)
                }
                _ => run_ablation(AblationKind::NoAugment, &mut clf, &domains, &model, &cfg.meta),
            }
            .map_err(runtime)?;
            for r in &outcome.history {
                lines.push(serde_json::to_value(r).expect("meta record serializes"));
            }
        }
        Method::Erm | Method::ErmFc => {
            let duals = cfg.meta.duals().map_err(runtime)?;
            let outcome = train_erm(
                &mut clf,
                &domains,
                &cfg.erm,
                cfg.method == Method::ErmFc,
                &duals,
                cfg.meta.variant,
            )
            .map_err(runtime)?;
            for r in &outcome.history {
                lines.push(serde_json::to_value(r).expect("erm record serializes"));
            }
        }
    }
    let path = cfg.out_dir.join("classifier.ckpt");
    save_checkpoint(&path, &classifier_checkpoint(&clf, cfg.fingerprint())).map_err(runtime)?;
    write_jsonl(&cfg.out_dir.join("meta_history.jsonl"), &lines)?;
    println!(
        "trained {} classifier; wrote {}",
        cfg.method.name(),
        path.display()
    );
    Ok(())
}

fn cmd_adapt(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(common)?.seeded();
    ensure_out_dir(&cfg)?;
    let domain = common
        .domain
        .as_deref()
        .ok_or_else(|| runtime("adapt requires --domain"))?;
    let domains = prepared_domains(&cfg)?;
    let target = find_domain(&domains, domain)?;
    let clf = classifier_from_checkpoint(
        &load_checkpoint(classifier_path(&cfg, common)).map_err(runtime)?,
    )
    .map_err(runtime)?;
    let model = if cfg.method.uses_transform() {
        Some(
            stage1_from_checkpoint(&load_checkpoint(stage1_path(&cfg, common)).map_err(runtime)?)
                .map_err(runtime)?,
        )
    } else {
        None
    };
    let fewshot = fewshot_slice(
        target,
        cfg.fewshot,
        derive_seed(cfg.seed, &format!("cli.fewshot.{domain}")),
    );
    let duals = cfg.meta.duals().map_err(runtime)?;
    let (params, _) =
        adapt_downstream(&clf, &fewshot, model.as_ref(), &cfg.meta, &duals).map_err(runtime)?;
    let adapted = clf.with_params(params);
    let path = cfg.out_dir.join("adapted.ckpt");
    save_checkpoint(&path, &classifier_checkpoint(&adapted, cfg.fingerprint()))
        .map_err(runtime)?;
    println!(
        "adapted on {} examples from {domain}; wrote {}",
        fewshot.len(),
        path.display()
    );
    Ok(())
}

fn cmd_evaluate(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(common)?.seeded();
    ensure_out_dir(&cfg)?;
    let domain = common
        .domain
        .as_deref()
        .ok_or_else(|| runtime("evaluate requires --domain"))?;
    let domains = prepared_domains(&cfg)?;
    let target = find_domain(&domains, domain)?;
    let clf = classifier_from_checkpoint(
        &load_checkpoint(classifier_path(&cfg, common)).map_err(runtime)?,
    )
    .map_err(runtime)?;
    let report = evaluate_model(&clf, target, 0.5).map_err(runtime)?;
    let line = format!(
        "{},{},{},{},{},{},{}",
        cfg.method.name(),
        report.domain,
        report.accuracy,
        report.delta_dp.csv_field(),
        report.delta_eopp.csv_field(),
        report.delta_eo.csv_field(),
        cfg.seed
    );
    let path = cfg.out_dir.join("evaluation.csv");
    std::fs::write(&path, format!("{RESULTS_CSV_HEADER}\n{line}\n"))
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    println!("{RESULTS_CSV_HEADER}");
    println!("{line}");
    Ok(())
}

fn print_result(result: &LodoResult) {
    println!("{RESULTS_CSV_HEADER}");
    for row in result.rows.iter().chain(std::iter::once(&result.avg)) {
        println!(
            "{},{},{:.4},{},{},{},{}",
            row.method,
            row.held_out,
            row.report.accuracy,
            row.report.delta_dp.csv_field(),
            row.report.delta_eopp.csv_field(),
            row.report.delta_eo.csv_field(),
            row.seed
        );
    }
}

fn cmd_lodo(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    ensure_out_dir(&cfg)?;
    let result = run_lodo(&cfg).map_err(runtime)?;
    emit_report(&result, ReportFormat::Csv, &cfg.out_dir).map_err(runtime)?;
    emit_report(&result, ReportFormat::Jsonl, &cfg.out_dir).map_err(runtime)?;
    print_result(&result);
    Ok(())
}

fn cmd_ablate(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    ensure_out_dir(&cfg)?;
    for method in [Method::Abs1, Method::Abs2] {
        let mut sub = cfg.clone();
        sub.method = method;
        sub.out_dir = cfg.out_dir.join(method.name());
        ensure_out_dir(&sub)?;
        let result = run_lodo(&sub).map_err(runtime)?;
        emit_report(&result, ReportFormat::Csv, &sub.out_dir).map_err(runtime)?;
        emit_report(&result, ReportFormat::Jsonl, &sub.out_dir).map_err(runtime)?;
        print_result(&result);
    }
    Ok(())
}
