//! One function per subcommand. Each command merges flags over the config
//! file over defaults, does its work through `veritrace-core`, writes its
//! declared outputs, and records a provenance manifest.

use crate::manifest::{default_manifest_path, write_manifest};
use crate::params::{merge, RunConfig};
use clap::Args;
use serde::Deserialize;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use veritrace_core::anomaly::{inject, write_labels, AnomalyType, ALL_ANOMALY_TYPES};
use veritrace_core::autoencoder::{pretrain, write_loss_history, Model, TrainConfig};
use veritrace_core::declare::{
    filter_constraints, mine, parse_whitelist, write_constraints_jsonl, DeclareTemplate,
    KnowledgeBase, ALL_TEMPLATES,
};
use veritrace_core::detect::{
    classify, metrics, score, select_threshold, write_scores_csv, Predictions,
    ThresholdHeuristic,
};
use veritrace_core::eventlog::{
    build_vocab, default_graph, generate_log, read_log, write_log, CsvSchema, EventLog,
};
use veritrace_core::ltn::{
    finetune, partition, synthesize_violations, write_finetune_history, AggregatorMode,
    FinetuneConfig,
};
use veritrace_core::pipeline::{ablate, write_ablation_csv, ExperimentConfig};
use veritrace_core::{rng, Error, Result};

/// Rewraps a bare I/O error so the message names the file involved.
fn with_path<T>(result: Result<T>, path: &Path) -> Result<T> {
    result.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    })
}

fn open_file(path: &Path) -> Result<std::fs::File> {
    with_path(std::fs::File::open(path).map_err(Error::Io), path)
}

fn read_input_log(path: &Path) -> Result<EventLog> {
    let parsed = with_path(read_log(path, &CsvSchema::default()), path)?;
    if parsed.skipped_events > 0 {
        eprintln!(
            "warning: skipped {} event(s) without an activity label in {}",
            parsed.skipped_events,
            path.display()
        );
    }
    Ok(parsed.log)
}

fn parse_types(names: &[String]) -> Result<Vec<AnomalyType>> {
    if names.is_empty() {
        return Ok(ALL_ANOMALY_TYPES.to_vec());
    }
    names.iter().map(|n| n.parse()).collect()
}

fn parse_templates(names: &[String]) -> Result<Vec<DeclareTemplate>> {
    if names.is_empty() {
        return Ok(ALL_TEMPLATES.to_vec());
    }
    names.iter().map(|n| n.parse()).collect()
}

fn split_list(flag: &Option<String>) -> Option<Vec<String>> {
    flag.as_ref().map(|s| {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(String::from)
            .collect()
    })
}

fn parse_heuristic(name: &str, percentile: f64, k_sigma: f64) -> Result<ThresholdHeuristic> {
    match name {
        "elbow" => Ok(ThresholdHeuristic::Elbow),
        "percentile" => Ok(ThresholdHeuristic::Percentile(percentile)),
        "mean_k_sigma" => Ok(ThresholdHeuristic::MeanPlusKSigma(k_sigma)),
        other => Err(Error::Argument(format!(
            "unknown heuristic '{other}' (expected elbow, percentile, or mean_k_sigma)"
        ))),
    }
}

fn config_echo<T: serde::Serialize>(params: &T) -> Result<serde_json::Value> {
    serde_json::to_value(params).map_err(|e| Error::Argument(format!("config echo: {e}")))
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output log path (.csv or .csv.gz)
    #[arg(long)]
    pub output: PathBuf,
    /// Number of cases to generate
    #[arg(long)]
    pub cases: Option<usize>,
    /// How many cases follow the rare route
    #[arg(long)]
    pub rare: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Manifest path (default: <output>.manifest.json)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_generate(args: &GenerateArgs, config: &RunConfig) -> Result<()> {
    let mut p = config.generate.clone();
    p.cases = merge(args.cases, p.cases);
    p.rare = merge(args.rare, p.rare);
    p.seed = merge(args.seed, p.seed);

    let log = generate_log(&default_graph(), p.cases, p.rare, p.seed)?;
    write_log(&log, &args.output)?;

    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(&args.output));
    write_manifest(&manifest, "generate", config_echo(&p)?, &[], &[&args.output])?;
    println!(
        "generated {} cases ({} events) -> {}",
        log.len(),
        log.event_count(),
        args.output.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    /// Input log (.csv/.xes, optionally .gz)
    #[arg(long)]
    pub input: PathBuf,
    /// Output (mutated) log path
    #[arg(long)]
    pub output: PathBuf,
    /// Ground-truth labels CSV path
    #[arg(long)]
    pub labels: PathBuf,
    /// Fraction of cases to mutate
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Comma-separated anomaly types (default: all six)
    #[arg(long)]
    pub types: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_inject(args: &InjectArgs, config: &RunConfig) -> Result<()> {
    let mut p = config.inject.clone();
    p.fraction = merge(args.fraction, p.fraction);
    p.seed = merge(args.seed, p.seed);
    if let Some(types) = split_list(&args.types) {
        p.types = types;
    }

    let log = read_input_log(&args.input)?;
    let types = parse_types(&p.types)?;
    let mut stream = rng::substream(p.seed, "inject");
    let labeled = inject(&log, p.fraction, &types, &mut stream)?;

    write_log(&labeled.log, &args.output)?;
    let labels_file = std::fs::File::create(&args.labels)?;
    write_labels(&labeled, BufWriter::new(labels_file))?;

    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(&args.output));
    write_manifest(
        &manifest,
        "inject",
        config_echo(&p)?,
        &[&args.input],
        &[&args.output, &args.labels],
    )?;
    println!(
        "injected anomalies into {} of {} cases -> {}",
        labeled.anomalous_count(),
        labeled.log.len(),
        args.output.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output constraints file (JSON lines)
    #[arg(long)]
    pub output: PathBuf,
    /// Comma-separated templates (default: all eight)
    #[arg(long)]
    pub templates: Option<String>,
    /// Apply thresholds/whitelist and emit a knowledge base
    #[arg(long)]
    pub select: bool,
    #[arg(long)]
    pub max_support: Option<f64>,
    #[arg(long)]
    pub min_confidence: Option<f64>,
    /// Comma-separated Template(A,B) entries
    #[arg(long)]
    pub whitelist: Option<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_mine(args: &MineArgs, config: &RunConfig) -> Result<()> {
    let mut p = config.mine.clone();
    p.select = args.select || p.select;
    p.max_support = merge(args.max_support, p.max_support);
    p.min_confidence = merge(args.min_confidence, p.min_confidence);
    if let Some(templates) = split_list(&args.templates) {
        p.templates = templates;
    }
    if let Some(w) = &args.whitelist {
        p.whitelist = w.clone();
    }

    let log = read_input_log(&args.input)?;
    let vocab = build_vocab(&log)?;
    let templates = parse_templates(&p.templates)?;
    let mined = mine(&log, &templates, &vocab)?;

    let out = std::fs::File::create(&args.output)?;
    let mut out = BufWriter::new(out);
    let kept = if p.select {
        let whitelist = if p.whitelist.trim().is_empty() {
            None
        } else {
            Some(parse_whitelist(&p.whitelist)?)
        };
        let kb = filter_constraints(
            &mined,
            p.max_support,
            p.min_confidence,
            whitelist.as_deref(),
        )?;
        kb.write_jsonl(&mut out)?;
        kb.constraints.len()
    } else {
        write_constraints_jsonl(&mined, &mut out)?;
        mined.len()
    };
    drop(out);

    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(&args.output));
    write_manifest(
        &manifest,
        "mine",
        config_echo(&p)?,
        &[&args.input],
        &[&args.output],
    )?;
    println!(
        "mined {} constraint(s){} -> {}",
        kept,
        if p.select { " after selection" } else { "" },
        args.output.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output model path (.ltnae)
    #[arg(long)]
    pub output: PathBuf,
    /// Per-epoch loss CSV path
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Denoising corruption probability per position
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated hidden layer sizes, e.g. 64,32,64
    #[arg(long)]
    pub hidden: Option<String>,
    /// Padded trace length (default: longest trace in the log)
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_pretrain(args: &PretrainArgs, config: &RunConfig) -> Result<()> {
    let mut p = config.pretrain.clone();
    p.epochs = merge(args.epochs, p.epochs);
    p.lr = merge(args.lr, p.lr);
    p.batch = merge(args.batch, p.batch);
    p.noise_rate = merge(args.noise_rate, p.noise_rate);
    p.seed = merge(args.seed, p.seed);
    p.max_len = merge(args.max_len, p.max_len);
    if let Some(hidden) = split_list(&args.hidden) {
        p.hidden = hidden
            .iter()
            .map(|h| {
                h.parse::<usize>()
                    .map_err(|_| Error::Argument(format!("invalid hidden layer size '{h}'")))
            })
            .collect::<Result<_>>()?;
    }

    let log = read_input_log(&args.input)?;
    let vocab = build_vocab(&log)?;
    let max_len = if p.max_len == 0 {
        log.max_trace_len()
    } else {
        p.max_len
    };
    let train = TrainConfig {
        epochs: p.epochs,
        lr: p.lr,
        batch: p.batch,
        noise_rate: p.noise_rate,
        seed: p.seed,
        hidden: p.hidden.clone(),
        max_len,
    };
    let model = pretrain(&log, &vocab, &train)?;
    model.save_to_path(&args.output)?;

    let mut outputs: Vec<&Path> = vec![&args.output];
    if let Some(loss_path) = &args.loss_csv {
        let file = std::fs::File::create(loss_path)?;
        write_loss_history(&model.meta.loss_history, BufWriter::new(file))?;
        outputs.push(loss_path);
    }

    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(&args.output));
    write_manifest(&manifest, "pretrain", config_echo(&p)?, &[&args.input], &outputs)?;
    let final_loss = model.meta.loss_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "pretrained {} epoch(s), final loss {final_loss:.6} -> {}",
        p.epochs,
        args.output.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Replay log: the log the model was pretrained on
    #[arg(long)]
    pub input: PathBuf,
    /// Pretrained model path
    #[arg(long)]
    pub model: PathBuf,
    /// Knowledge base (JSON lines); its first constraint drives the
    /// t+/t- partition
    #[arg(long)]
    pub kb: PathBuf,
    /// Output model path
    #[arg(long)]
    pub output: PathBuf,
    /// Per-epoch history CSV path
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub lambda_rec: Option<f64>,
    #[arg(long)]
    pub lambda_sat: Option<f64>,
    #[arg(long)]
    pub p_exists: Option<f64>,
    #[arg(long)]
    pub p_forall: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replay_fraction: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_finetune(args: &FinetuneArgs, config: &RunConfig) -> Result<()> {
    let mut p = config.finetune.clone();
    p.lambda_rec = merge(args.lambda_rec, p.lambda_rec);
    p.lambda_sat = merge(args.lambda_sat, p.lambda_sat);
    p.p_exists = merge(args.p_exists, p.p_exists);
    p.p_forall = merge(args.p_forall, p.p_forall);
    p.epochs = merge(args.epochs, p.epochs);
    p.lr = merge(args.lr, p.lr);
    p.seed = merge(args.seed, p.seed);
    p.replay_fraction = merge(args.replay_fraction, p.replay_fraction);
    p.batch = merge(args.batch, p.batch);

    let log = read_input_log(&args.input)?;
    let model = with_path(Model::load_from_path(&args.model), &args.model)?;
    let kb_file = open_file(&args.kb)?;
    let kb = KnowledgeBase::read_jsonl(BufReader::new(kb_file))?;

    let anchor = &kb.constraints[0];
    let mut part = partition(&log, anchor)?;
    if part.t_minus.is_empty() {
        let mut stream = rng::substream(p.seed, "violations");
        let count = part.t_plus.len().min(8).max(1);
        part.t_minus = synthesize_violations(&part.t_plus, anchor, count, &mut stream)?;
        eprintln!(
            "note: no violating traces in the log; synthesized {count} from t+"
        );
    }

    let ft = FinetuneConfig {
        lambda_rec: p.lambda_rec,
        lambda_sat: p.lambda_sat,
        p_exists: p.p_exists,
        p_forall: p.p_forall,
        epochs: p.epochs,
        lr: p.lr,
        seed: p.seed,
        mode: AggregatorMode::Smooth,
        replay_fraction: p.replay_fraction,
        batch: p.batch,
    };
    let outcome = finetune(&model, &log, &part, &kb, &ft)?;
    outcome.model.save_to_path(&args.output)?;

    let mut outputs: Vec<&Path> = vec![&args.output];
    if let Some(history_path) = &args.history {
        let file = std::fs::File::create(history_path)?;
        write_finetune_history(&outcome.history, BufWriter::new(file))?;
        outputs.push(history_path);
    }

    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(&args.output));
    write_manifest(
        &manifest,
        "finetune",
        config_echo(&p)?,
        &[&args.input, &args.model, &args.kb],
        &outputs,
    )?;
    let sat = outcome.history.last().map(|h| h.t_plus_sat).unwrap_or(f64::NAN);
    println!(
        "fine-tuned {} epoch(s) on |t+|={} |t-|={}, final t+ satisfiability {sat:.4} -> {}",
        p.epochs,
        part.t_plus.len(),
        part.t_minus.len(),
        args.output.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output report JSON path
    #[arg(long)]
    pub output: PathBuf,
    /// Per-case scores CSV path
    #[arg(long)]
    pub scores_csv: Option<PathBuf>,
    /// elbow | percentile | mean_k_sigma
    #[arg(long)]
    pub heuristic: Option<String>,
    #[arg(long)]
    pub percentile: Option<f64>,
    #[arg(long)]
    pub k_sigma: Option<f64>,
    /// Explicit threshold, bypassing the heuristic
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_detect(args: &DetectArgs, config: &RunConfig) -> Result<()> {
    let mut p = config.detect.clone();
    if let Some(h) = &args.heuristic {
        p.heuristic = h.clone();
    }
    p.percentile = merge(args.percentile, p.percentile);
    p.k_sigma = merge(args.k_sigma, p.k_sigma);
    if args.threshold.is_some() {
        p.threshold = args.threshold;
    }

    let log = read_input_log(&args.input)?;
    let model = with_path(Model::load_from_path(&args.model), &args.model)?;
    let scores = score(&model, &log, args.model.display().to_string())?;
    let threshold = match p.threshold {
        Some(t) => t,
        None => select_threshold(&scores, parse_heuristic(&p.heuristic, p.percentile, p.k_sigma)?)?,
    };
    let pred = classify(&scores, threshold);
    let flagged = pred.by_case.values().filter(|&&v| v).count();

    let score_map: BTreeMap<&str, f64> = scores
        .entries()
        .iter()
        .map(|e| (e.case_id.as_str(), e.error))
        .collect();
    let report = serde_json::json!({
        "model_id": scores.model_id,
        "heuristic": if p.threshold.is_some() { "explicit".to_string() } else { p.heuristic.clone() },
        "threshold": threshold,
        "cases": scores.len(),
        "flagged": flagged,
        "scores": score_map,
        "predictions": pred.by_case,
    });
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Argument(format!("report serialization: {e}")))?;
    std::fs::write(&args.output, text + "\n")?;

    let mut outputs: Vec<&Path> = vec![&args.output];
    if let Some(scores_path) = &args.scores_csv {
        let file = std::fs::File::create(scores_path)?;
        write_scores_csv(&scores, BufWriter::new(file))?;
        outputs.push(scores_path);
    }

    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(&args.output));
    write_manifest(
        &manifest,
        "detect",
        config_echo(&p)?,
        &[&args.input, &args.model],
        &outputs,
    )?;
    println!(
        "flagged {flagged} of {} cases at threshold {threshold:.6} -> {}",
        scores.len(),
        args.output.display()
    );
    Ok(())
}

/// The slice of a detect report that evaluation needs.
#[derive(Debug, Deserialize)]
struct PredictionsFile {
    threshold: f64,
    predictions: BTreeMap<String, bool>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Detect report JSON with per-case predictions
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground-truth labels CSV (from inject)
    #[arg(long)]
    pub labels: PathBuf,
    /// Optional file of rare-but-conformant case ids, one per line
    #[arg(long)]
    pub rare_cases: Option<PathBuf>,
    /// Output metrics JSON path
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_evaluate(args: &EvaluateArgs, _config: &RunConfig) -> Result<()> {
    let text = with_path(
        std::fs::read_to_string(&args.predictions).map_err(Error::Io),
        &args.predictions,
    )?;
    let pred_file: PredictionsFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: None,
        msg: format!("predictions file {}: {e}", args.predictions.display()),
    })?;
    let labels_file = open_file(&args.labels)?;
    let truth = veritrace_core::anomaly::read_labels(BufReader::new(labels_file))?;

    let rare: BTreeSet<String> = match &args.rare_cases {
        None => BTreeSet::new(),
        Some(path) => {
            let file = open_file(path)?;
            BufReader::new(file)
                .lines()
                .map(|l| l.map(|s| s.trim().to_string()))
                .filter(|l| !matches!(l, Ok(s) if s.is_empty()))
                .collect::<std::io::Result<_>>()?
        }
    };

    let pred = Predictions {
        threshold: pred_file.threshold,
        by_case: pred_file.predictions,
    };
    let report = metrics(&pred, &truth, &rare)?;

    let body = serde_json::json!({
        "predictions_file": args.predictions.display().to_string(),
        "labels_file": args.labels.display().to_string(),
        "report": report,
    });
    let text = serde_json::to_string_pretty(&body)
        .map_err(|e| Error::Argument(format!("report serialization: {e}")))?;
    std::fs::write(&args.output, text + "\n")?;

    let mut inputs: Vec<&Path> = vec![&args.predictions, &args.labels];
    if let Some(rc) = &args.rare_cases {
        inputs.push(rc);
    }
    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(&args.output));
    write_manifest(
        &manifest,
        "evaluate",
        serde_json::json!({}),
        &inputs,
        &[&args.output],
    )?;
    println!(
        "f1={:.4} precision={:.4} recall={:.4} tp={} fp={} tn={} fn={}",
        report.f1,
        report.precision,
        report.recall,
        report.true_positives,
        report.false_positives,
        report.true_negatives,
        report.false_negatives
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Output ablation table CSV
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub cases: Option<usize>,
    /// Comma-separated rare-count sweep, e.g. 10,25
    #[arg(long)]
    pub rare_counts: Option<String>,
    /// Comma-separated templates to sweep
    #[arg(long)]
    pub templates: Option<String>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub max_support: Option<f64>,
    #[arg(long)]
    pub min_confidence: Option<f64>,
    /// Anchor constraint, e.g. "Response(DevelopMethod,FinalDecision)"
    #[arg(long)]
    pub whitelist: Option<String>,
    /// elbow | percentile | mean_k_sigma (used by both arms of every cell)
    #[arg(long)]
    pub heuristic: Option<String>,
    #[arg(long)]
    pub percentile: Option<f64>,
    #[arg(long)]
    pub k_sigma: Option<f64>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_ablate(args: &AblateArgs, config: &RunConfig) -> Result<()> {
    let mut p = config.ablate.clone();
    p.cases = merge(args.cases, p.cases);
    p.fraction = merge(args.fraction, p.fraction);
    p.seed = merge(args.seed, p.seed);
    p.pretrain_epochs = merge(args.pretrain_epochs, p.pretrain_epochs);
    p.finetune_epochs = merge(args.finetune_epochs, p.finetune_epochs);
    p.max_support = merge(args.max_support, p.max_support);
    p.min_confidence = merge(args.min_confidence, p.min_confidence);
    if let Some(h) = &args.heuristic {
        p.heuristic = h.clone();
    }
    p.percentile = merge(args.percentile, p.percentile);
    p.k_sigma = merge(args.k_sigma, p.k_sigma);
    if let Some(templates) = split_list(&args.templates) {
        p.templates = templates;
    }
    if let Some(rc) = split_list(&args.rare_counts) {
        p.rare_counts = rc
            .iter()
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::Argument(format!("invalid rare count '{v}'")))
            })
            .collect::<Result<_>>()?;
    }
    if let Some(w) = &args.whitelist {
        p.whitelist = w.clone();
    }

    let templates = parse_templates(&p.templates)?;
    let whitelist = parse_whitelist(&p.whitelist)?;
    if whitelist.is_empty() {
        return Err(Error::Argument(
            "ablation needs a whitelisted anchor constraint".into(),
        ));
    }
    let mut experiment = ExperimentConfig {
        cases: p.cases,
        anomaly_fraction: p.fraction,
        seed: p.seed,
        max_support: p.max_support,
        min_confidence: p.min_confidence,
        whitelist,
        heuristic: parse_heuristic(&p.heuristic, p.percentile, p.k_sigma)?,
        ..ExperimentConfig::default()
    };
    experiment.train.epochs = p.pretrain_epochs;
    experiment.finetune.epochs = p.finetune_epochs;

    let cells = ablate(&experiment, &templates, &p.rare_counts)?;
    let file = std::fs::File::create(&args.output)?;
    write_ablation_csv(&cells, BufWriter::new(file))?;

    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(&args.output));
    write_manifest(&manifest, "ablate", config_echo(&p)?, &[], &[&args.output])?;

    let failed = cells.iter().filter(|c| c.error.is_some()).count();
    println!(
        "ablation: {} cell(s), {} failed -> {}",
        cells.len(),
        failed,
        args.output.display()
    );
    for cell in cells.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "warning: cell ({}, {}) failed: {}",
            cell.template.name(),
            cell.rare_count,
            cell.error.as_deref().unwrap_or("unknown")
        );
    }
    Ok(())
}
