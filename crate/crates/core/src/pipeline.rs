//! End-to-end experiment orchestration: generate → inject → pretrain →
//! mine → partition → fine-tune → detect, with shared seeds so the
//! baseline and fine-tuned arms see identical data, plus the
//! constraint-ablation sweep.

use crate::anomaly::{inject, AnomalyType, LabeledLog, ALL_ANOMALY_TYPES};
use crate::autoencoder::{pretrain, Model, TrainConfig};
use crate::declare::{
    filter_constraints, mine, DeclareTemplate, KnowledgeBase, MinedConstraint, WhitelistEntry,
};
use crate::detect::{classify, metrics, score, select_threshold, DetectionReport, ThresholdHeuristic};
use crate::eventlog::{build_vocab, generate_log, EventLog, LikelihoodGraph};
use crate::ltn::{finetune, partition, synthesize_violations, FinetuneConfig, FinetuneEpoch, Partition};
use crate::rng;
use crate::{Error, Result};
use std::collections::BTreeSet;
use std::io::Write;

/// Everything one experiment run needs. The single `seed` fans out into
/// named substreams per stage, so arms and cells stay independent.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub graph: LikelihoodGraph,
    pub cases: usize,
    pub rare_count: usize,
    pub anomaly_fraction: f64,
    pub anomaly_types: Vec<AnomalyType>,
    pub seed: u64,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    /// Templates offered to the miner.
    pub templates: Vec<DeclareTemplate>,
    pub max_support: f64,
    pub min_confidence: f64,
    /// Constraints admitted into the knowledge base regardless of
    /// confidence (support still applies).
    pub whitelist: Vec<WhitelistEntry>,
    pub heuristic: ThresholdHeuristic,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            graph: crate::eventlog::default_graph(),
            cases: 1000,
            rare_count: 10,
            anomaly_fraction: 0.3,
            anomaly_types: ALL_ANOMALY_TYPES.to_vec(),
            seed: 17,
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            templates: vec![DeclareTemplate::Response],
            max_support: 0.1,
            // injected Insert anomalies drop rare-branch activities into
            // non-conformant traces, deflating the anchor constraint's
            // confidence well below clean-log levels
            min_confidence: 0.3,
            whitelist: vec![WhitelistEntry {
                template: DeclareTemplate::Response,
                args: vec!["DevelopMethod".into(), "FinalDecision".into()],
            }],
            heuristic: ThresholdHeuristic::Elbow,
        }
    }
}

/// Results of one run: both detection arms plus the artifacts the
/// analysis questions are asked of.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub baseline: DetectionReport,
    pub ltn: DetectionReport,
    /// Mean reconstruction error of the pretrained model over the
    /// evaluation log (the fine-tuning start point for the
    /// generalization guard).
    pub baseline_mean_rec: f64,
    /// Same mean under the fine-tuned model.
    pub ltn_mean_rec: f64,
    pub history: Vec<FinetuneEpoch>,
    pub kb: KnowledgeBase,
    pub partition_sizes: (usize, usize, usize),
    /// Count of synthesized violations added when the log held none.
    pub synthesized: usize,
    /// Cases whose pre-injection trace followed the rare route.
    pub rare_cases: BTreeSet<String>,
}

/// Case ids of traces following the graph's designated rare route.
pub fn rare_route_cases(log: &EventLog, graph: &LikelihoodGraph) -> BTreeSet<String> {
    log.traces
        .iter()
        .filter(|t| t.activities().eq(graph.rare_route.iter().map(String::as_str)))
        .map(|t| t.case_id.clone())
        .collect()
}

/// Runs both arms on one generated+injected log.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    // stage 1: data
    let clean = generate_log(&config.graph, config.cases, config.rare_count, config.seed)?;
    let rare_cases = rare_route_cases(&clean, &config.graph);
    let mut inject_rng = rng::substream(config.seed, "inject");
    let labeled = inject(
        &clean,
        config.anomaly_fraction,
        &config.anomaly_types,
        &mut inject_rng,
    )?;

    // stage 2: unsupervised pretraining on the full (contaminated) log;
    // max_len follows the data since injection can lengthen traces
    let vocab = build_vocab(&labeled.log)?;
    let train = TrainConfig {
        max_len: labeled.log.max_trace_len(),
        seed: config.seed,
        ..config.train.clone()
    };
    let model = pretrain(&labeled.log, &vocab, &train)?;

    // stage 3: baseline arm
    let baseline_scores = score(&model, &labeled.log, "baseline")?;
    let baseline_threshold = select_threshold(&baseline_scores, config.heuristic)?;
    let baseline_pred = classify(&baseline_scores, baseline_threshold);
    let baseline = metrics(&baseline_pred, &labeled.labels, &rare_cases)?;
    let baseline_mean_rec = baseline_scores.mean_error();

    // stage 4: knowledge base and partition
    let mined = mine(&labeled.log, &config.templates, &vocab)?;
    let whitelist = if config.whitelist.is_empty() {
        None
    } else {
        Some(config.whitelist.as_slice())
    };
    let kb = filter_constraints(&mined, config.max_support, config.min_confidence, whitelist)?;
    let anchor = &kb.constraints[0];
    let mut part = partition(&labeled.log, anchor)?;
    let mut synthesized = 0;
    if part.t_minus.is_empty() {
        let mut viol_rng = rng::substream(config.seed, "violations");
        let count = part.t_plus.len().min(8).max(1);
        part.t_minus = synthesize_violations(&part.t_plus, anchor, count, &mut viol_rng)?;
        synthesized = count;
    }
    let partition_sizes = (part.t_plus.len(), part.t_minus.len(), part.excluded.len());

    // stage 5: LTN arm
    let ft = FinetuneConfig {
        seed: config.seed,
        ..config.finetune.clone()
    };
    let outcome = finetune(&model, &labeled.log, &part, &kb, &ft)?;
    let ltn_scores = score(&outcome.model, &labeled.log, "ltn")?;
    let ltn_threshold = select_threshold(&ltn_scores, config.heuristic)?;
    let ltn_pred = classify(&ltn_scores, ltn_threshold);
    let ltn = metrics(&ltn_pred, &labeled.labels, &rare_cases)?;
    let ltn_mean_rec = ltn_scores.mean_error();

    Ok(ExperimentOutcome {
        baseline,
        ltn,
        baseline_mean_rec,
        ltn_mean_rec,
        history: outcome.history,
        kb,
        partition_sizes,
        synthesized,
        rare_cases,
    })
}

/// One ablation cell; `error` captures a failed stage without stopping
/// the sweep.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub template: DeclareTemplate,
    pub rare_count: usize,
    pub f1_baseline: f64,
    pub f1_ltn: Option<f64>,
    pub sat_after: Option<f64>,
    pub error: Option<String>,
}

/// Sweeps (template × rare_count), holding everything else fixed. The
/// baseline arm is computed once per rare_count and shared across that
/// column's cells; the whitelisted constraint keeps the base config's
/// arguments with the cell's template substituted.
pub fn ablate(
    base: &ExperimentConfig,
    templates: &[DeclareTemplate],
    rare_counts: &[usize],
) -> Result<Vec<AblationCell>> {
    if templates.is_empty() || rare_counts.is_empty() {
        return Err(Error::Argument(
            "ablation needs at least one template and one rare count".into(),
        ));
    }
    let base_args = base
        .whitelist
        .first()
        .map(|w| w.args.clone())
        .ok_or_else(|| {
            Error::Argument("ablation needs a whitelisted constraint to vary".into())
        })?;

    let mut cells = Vec::with_capacity(templates.len() * rare_counts.len());
    for &rare_count in rare_counts {
        // shared per-column stages
        let clean = generate_log(&base.graph, base.cases, rare_count, base.seed)?;
        let rare_cases = rare_route_cases(&clean, &base.graph);
        let mut inject_rng = rng::substream(base.seed, "inject");
        let labeled = inject(
            &clean,
            base.anomaly_fraction,
            &base.anomaly_types,
            &mut inject_rng,
        )?;
        let vocab = build_vocab(&labeled.log)?;
        let train = TrainConfig {
            max_len: labeled.log.max_trace_len(),
            seed: base.seed,
            ..base.train.clone()
        };
        let model = pretrain(&labeled.log, &vocab, &train)?;
        let baseline_scores = score(&model, &labeled.log, "baseline")?;
        let baseline_threshold = select_threshold(&baseline_scores, base.heuristic)?;
        let baseline =
            metrics(&classify(&baseline_scores, baseline_threshold), &labeled.labels, &rare_cases)?;

        for &template in templates {
            let cell = run_ablation_cell(
                base, template, &base_args, &labeled, &vocab, &model, &rare_cases,
            );
            let (f1_ltn, sat_after, error) = match cell {
                Ok((f1, sat)) => (Some(f1), Some(sat), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            cells.push(AblationCell {
                template,
                rare_count,
                f1_baseline: baseline.f1,
                f1_ltn,
                sat_after,
                error,
            });
        }
    }
    Ok(cells)
}

#[allow(clippy::too_many_arguments)]
fn run_ablation_cell(
    base: &ExperimentConfig,
    template: DeclareTemplate,
    base_args: &[String],
    labeled: &LabeledLog,
    vocab: &crate::eventlog::Vocabulary,
    model: &Model,
    rare_cases: &BTreeSet<String>,
) -> Result<(f64, f64)> {
    let args: Vec<String> = base_args.iter().take(template.arity()).cloned().collect();
    if args.len() != template.arity() {
        return Err(Error::Argument(format!(
            "{template} needs {} argument(s) but the base whitelist provides {}",
            template.arity(),
            base_args.len()
        )));
    }
    let entry = WhitelistEntry { template, args };
    let mined = mine(&labeled.log, &[template], vocab)?;
    let kb = filter_constraints(
        &mined,
        base.max_support,
        base.min_confidence,
        Some(std::slice::from_ref(&entry)),
    )?;
    let anchor: &MinedConstraint = &kb.constraints[0];
    let mut part: Partition = partition(&labeled.log, anchor)?;
    if part.t_minus.is_empty() {
        let mut viol_rng = rng::substream(base.seed, "violations");
        let count = part.t_plus.len().min(8).max(1);
        part.t_minus = synthesize_violations(&part.t_plus, anchor, count, &mut viol_rng)?;
    }
    let ft = FinetuneConfig {
        seed: base.seed,
        ..base.finetune.clone()
    };
    let outcome = finetune(model, &labeled.log, &part, &kb, &ft)?;
    let ltn_scores = score(&outcome.model, &labeled.log, "ltn")?;
    let threshold = select_threshold(&ltn_scores, base.heuristic)?;
    let report = metrics(&classify(&ltn_scores, threshold), &labeled.labels, rare_cases)?;
    let sat_after = outcome.history.last().map(|h| h.t_plus_sat).unwrap_or(1.0);
    Ok((report.f1, sat_after))
}

/// Ablation CSV: `template, rare_count, f1_baseline, f1_ltn, sat_after`;
/// failed cells leave the last two fields empty.
pub fn write_ablation_csv<W: Write>(cells: &[AblationCell], mut w: W) -> Result<()> {
    writeln!(w, "template,rare_count,f1_baseline,f1_ltn,sat_after")?;
    for c in cells {
        let f1_ltn = c.f1_ltn.map(|v| v.to_string()).unwrap_or_default();
        let sat = c.sat_after.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{}",
            c.template.name(),
            c.rare_count,
            c.f1_baseline,
            f1_ltn,
            sat
        )?;
    }
    Ok(())
}
