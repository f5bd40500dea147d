//! Detection layer: reconstruction-error scoring, threshold heuristics,
//! strict-threshold classification, and precision/recall/F1 reporting
//! with a separate breakdown for rare-but-conformant traces.

use crate::anomaly::Label;
use crate::autoencoder::{encode_trace, EncodedTrace, Model};
use crate::eventlog::EventLog;
use crate::{exec, Error, Result};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

/// One scored case.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub case_id: String,
    pub error: f64,
}

/// Per-case reconstruction errors for one model, in log order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub model_id: String,
    entries: Vec<ScoreEntry>,
}

impl ScoreTable {
    /// Validates finiteness, nonnegativity, and case-id uniqueness.
    pub fn new(model_id: impl Into<String>, entries: Vec<ScoreEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !e.error.is_finite() || e.error < 0.0 {
                return Err(Error::Domain(format!(
                    "reconstruction error for case '{}' is {}, expected a finite nonnegative value",
                    e.case_id, e.error
                )));
            }
            if !seen.insert(e.case_id.as_str()) {
                return Err(Error::Argument(format!(
                    "duplicate case id '{}' in score table",
                    e.case_id
                )));
            }
        }
        Ok(ScoreTable {
            model_id: model_id.into(),
            entries,
        })
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, case_id: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.case_id == case_id)
            .map(|e| e.error)
    }

    /// Errors sorted ascending.
    pub fn sorted_errors(&self) -> Vec<f64> {
        let mut errs: Vec<f64> = self.entries.iter().map(|e| e.error).collect();
        errs.sort_by(f64::total_cmp);
        errs
    }

    pub fn mean_error(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.error).sum::<f64>() / self.entries.len() as f64
    }
}

/// Scores every trace: encode → forward (no corruption) → mean squared
/// error. Pure, per-trace parallel, order-preserving.
pub fn score(model: &Model, log: &EventLog, model_id: impl Into<String>) -> Result<ScoreTable> {
    let encoded: Vec<(String, EncodedTrace)> = log
        .traces
        .iter()
        .map(|t| {
            let enc = encode_trace(t, &model.vocab, model.arch.max_len).map_err(|e| match e {
                Error::Vocabulary(msg) => {
                    Error::Vocabulary(format!("case '{}': {msg}", t.case_id))
                }
                other => other,
            })?;
            Ok((t.case_id.clone(), enc))
        })
        .collect::<Result<_>>()?;
    let entries: Vec<ScoreEntry> = exec::map_ordered(&encoded, |(case_id, enc)| {
        model.score(enc).map(|error| ScoreEntry {
            case_id: case_id.clone(),
            error,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    ScoreTable::new(model_id, entries)
}

/// Threshold selection heuristics over a score distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdHeuristic {
    /// Midpoint of the largest gap between consecutive sorted errors,
    /// searched in the upper half of the sequence; ties take the smallest
    /// midpoint.
    Elbow,
    /// Linear-interpolated q-quantile, q in percent (0–100).
    Percentile(f64),
    /// Mean plus k population standard deviations.
    MeanPlusKSigma(f64),
}

pub fn select_threshold(scores: &ScoreTable, heuristic: ThresholdHeuristic) -> Result<f64> {
    let errs = scores.sorted_errors();
    match heuristic {
        ThresholdHeuristic::Elbow => {
            let n = errs.len();
            if n < 3 {
                return Err(Error::Argument(format!(
                    "elbow heuristic needs at least 3 scores, got {n}; use the percentile heuristic instead"
                )));
            }
            let start = n / 2;
            let mut best_gap = f64::NEG_INFINITY;
            let mut best_mid = 0.0;
            for i in start..n - 1 {
                let gap = errs[i + 1] - errs[i];
                if gap > best_gap {
                    best_gap = gap;
                    best_mid = (errs[i] + errs[i + 1]) / 2.0;
                }
            }
            Ok(best_mid)
        }
        ThresholdHeuristic::Percentile(q) => {
            if errs.is_empty() {
                return Err(Error::Argument("cannot take a percentile of zero scores".into()));
            }
            if !(0.0..=100.0).contains(&q) || !q.is_finite() {
                return Err(Error::Argument(format!(
                    "percentile must be in [0,100], got {q}"
                )));
            }
            let h = (errs.len() - 1) as f64 * q / 100.0;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            Ok(errs[lo] + (h - lo as f64) * (errs[hi] - errs[lo]))
        }
        ThresholdHeuristic::MeanPlusKSigma(k) => {
            if errs.is_empty() {
                return Err(Error::Argument(
                    "cannot compute mean and deviation of zero scores".into(),
                ));
            }
            if !k.is_finite() {
                return Err(Error::Argument(format!("sigma multiplier must be finite, got {k}")));
            }
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
            Ok(mean + k * var.sqrt())
        }
    }
}

/// Predicted labels at a fixed threshold: anomalous iff error is
/// strictly above it.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub threshold: f64,
    /// case id → predicted anomalous
    pub by_case: BTreeMap<String, bool>,
}

pub fn classify(scores: &ScoreTable, threshold: f64) -> Predictions {
    Predictions {
        threshold,
        by_case: scores
            .entries
            .iter()
            .map(|e| (e.case_id.clone(), e.error > threshold))
            .collect(),
    }
}

/// Flagging statistics for one case group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    pub cases: usize,
    /// Predicted anomalous within the group.
    pub flagged: usize,
    /// `flagged / cases`; 0 for an empty group.
    pub flagged_rate: f64,
}

/// Confusion counts, derived metrics, and the per-group breakdown.
/// Anomalous is the positive class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Breakdown over "normal", "rare_conformant", "anomalous".
    pub groups: BTreeMap<String, GroupStats>,
    /// case id → predicted anomalous.
    pub predictions: BTreeMap<String, bool>,
}

impl DetectionReport {
    pub fn case_count(&self) -> usize {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Compares predictions with ground truth. `rare_cases` carves the
/// rare-but-conformant group out of the true-normal cases so its
/// false-positive rate is visible on its own.
pub fn metrics(
    pred: &Predictions,
    truth: &BTreeMap<String, Label>,
    rare_cases: &BTreeSet<String>,
) -> Result<DetectionReport> {
    if pred.by_case.len() != truth.len()
        || !pred.by_case.keys().eq(truth.keys())
    {
        let only_pred: Vec<&String> = pred
            .by_case
            .keys()
            .filter(|k| !truth.contains_key(*k))
            .take(3)
            .collect();
        let only_truth: Vec<&String> = truth
            .keys()
            .filter(|k| !pred.by_case.contains_key(*k))
            .take(3)
            .collect();
        return Err(Error::Argument(format!(
            "predictions and ground truth cover different case sets \
             (e.g. only predicted: {only_pred:?}, only labeled: {only_truth:?})"
        )));
    }

    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    let mut group_counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for name in ["normal", "rare_conformant", "anomalous"] {
        group_counts.insert(name, (0, 0));
    }
    for (case_id, &predicted) in &pred.by_case {
        let actual = truth[case_id].is_anomalous();
        match (actual, predicted) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fneg += 1,
        }
        let group = if actual {
            "anomalous"
        } else if rare_cases.contains(case_id) {
            "rare_conformant"
        } else {
            "normal"
        };
        let slot = group_counts.get_mut(group).expect("fixed group keys");
        slot.0 += 1;
        if predicted {
            slot.1 += 1;
        }
    }

    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };

    Ok(DetectionReport {
        threshold: pred.threshold,
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fneg,
        precision,
        recall,
        f1,
        groups: group_counts
            .into_iter()
            .map(|(name, (cases, flagged))| {
                (
                    name.to_string(),
                    GroupStats {
                        cases,
                        flagged,
                        flagged_rate: ratio(flagged, cases),
                    },
                )
            })
            .collect(),
        predictions: pred.by_case.clone(),
    })
}

/// Writes scores as `case_id,score` CSV in log order.
pub fn write_scores_csv<W: Write>(table: &ScoreTable, mut w: W) -> Result<()> {
    writeln!(w, "case_id,score")?;
    for e in &table.entries {
        writeln!(w, "{},{}", e.case_id, e.error)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anomaly::{inject, AnomalyType, ALL_ANOMALY_TYPES};
    use crate::autoencoder::{pretrain, TrainConfig};
    use crate::eventlog::{build_vocab, default_graph, generate_log};
    use crate::rng;

    fn table(errors: &[f64]) -> ScoreTable {
        ScoreTable::new(
            "test",
            errors
                .iter()
                .enumerate()
                .map(|(i, &error)| ScoreEntry {
                    case_id: format!("c{i}"),
                    error,
                })
                .collect(),
        )
        .unwrap()
    }

    fn truth_from(pred: &Predictions, actual: impl Fn(&str) -> bool) -> BTreeMap<String, Label> {
        pred.by_case
            .keys()
            .map(|k| {
                let label = if actual(k) {
                    Label::Anomalous(AnomalyType::Insert)
                } else {
                    Label::Normal
                };
                (k.clone(), label)
            })
            .collect()
    }

    #[test]
    fn score_table_validates_entries() {
        assert!(ScoreTable::new("m", vec![]).unwrap().is_empty());
        let bad = ScoreTable::new(
            "m",
            vec![ScoreEntry {
                case_id: "a".into(),
                error: f64::NAN,
            }],
        );
        assert!(matches!(bad, Err(Error::Domain(_))));
        let dup = ScoreTable::new(
            "m",
            vec![
                ScoreEntry {
                    case_id: "a".into(),
                    error: 0.1,
                },
                ScoreEntry {
                    case_id: "a".into(),
                    error: 0.2,
                },
            ],
        );
        assert!(matches!(dup, Err(Error::Argument(_))));
    }

    #[test]
    fn scoring_is_permutation_invariant_and_nonnegative() {
        let graph = default_graph();
        let log = generate_log(&graph, 30, 0, 21).unwrap();
        let vocab = build_vocab(&log).unwrap();
        let config = TrainConfig {
            epochs: 2,
            hidden: vec![24, 24],
            ..TrainConfig::default()
        };
        let model = pretrain(&log, &vocab, &config).unwrap();

        let scores = score(&model, &log, "m").unwrap();
        assert_eq!(scores.len(), log.len());
        assert!(scores.entries().iter().all(|e| e.error >= 0.0));

        let mut reversed = log.clone();
        reversed.traces.reverse();
        let scores_rev = score(&model, &reversed, "m").unwrap();
        for e in scores.entries() {
            assert_eq!(scores_rev.get(&e.case_id), Some(e.error));
        }
    }

    #[test]
    fn trained_model_separates_normal_from_anomalous() {
        let graph = default_graph();
        let log = generate_log(&graph, 60, 0, 23).unwrap();
        let vocab = build_vocab(&log).unwrap();
        let config = TrainConfig {
            epochs: 25,
            hidden: vec![48, 24, 48],
            ..TrainConfig::default()
        };
        let model = pretrain(&log, &vocab, &config).unwrap();

        let mut r = rng::substream(23, "inject");
        let labeled = inject(&log, 0.5, &ALL_ANOMALY_TYPES, &mut r).unwrap();
        let scores = score(&model, &labeled.log, "m").unwrap();

        let (mut normal_sum, mut normal_n, mut anom_sum, mut anom_n) = (0.0, 0, 0.0, 0);
        for e in scores.entries() {
            if labeled.labels[&e.case_id].is_anomalous() {
                anom_sum += e.error;
                anom_n += 1;
            } else {
                normal_sum += e.error;
                normal_n += 1;
            }
        }
        let normal_mean = normal_sum / normal_n as f64;
        let anom_mean = anom_sum / anom_n as f64;
        assert!(
            normal_mean < anom_mean,
            "normal mean {normal_mean} should be below anomalous mean {anom_mean}"
        );
    }

    #[test]
    fn elbow_finds_upper_half_max_gap() {
        let t = select_threshold(&table(&[0.1, 0.1, 0.1, 0.9, 0.95]), ThresholdHeuristic::Elbow)
            .unwrap();
        assert!((t - 0.5).abs() < 1e-12);

        // all gaps equal in the upper half → smallest midpoint wins
        let t = select_threshold(
            &table(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ThresholdHeuristic::Elbow,
        )
        .unwrap();
        assert!((t - 4.5).abs() < 1e-12);

        let err = select_threshold(&table(&[0.1, 0.2]), ThresholdHeuristic::Elbow).unwrap_err();
        match err {
            Error::Argument(msg) => assert!(msg.contains("percentile"), "{msg}"),
            other => panic!("expected argument error, got {other:?}"),
        }
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let t = select_threshold(
            &table(&[1.0, 2.0, 3.0, 4.0]),
            ThresholdHeuristic::Percentile(50.0),
        )
        .unwrap();
        assert!((t - 2.5).abs() < 1e-12);
        let t0 = select_threshold(&table(&[3.0, 1.0, 2.0]), ThresholdHeuristic::Percentile(0.0))
            .unwrap();
        assert_eq!(t0, 1.0);
        let t100 =
            select_threshold(&table(&[3.0, 1.0, 2.0]), ThresholdHeuristic::Percentile(100.0))
                .unwrap();
        assert_eq!(t100, 3.0);
        assert!(select_threshold(&table(&[1.0]), ThresholdHeuristic::Percentile(101.0)).is_err());
    }

    #[test]
    fn mean_plus_k_sigma_uses_population_std() {
        let t = select_threshold(&table(&[2.0, 4.0]), ThresholdHeuristic::MeanPlusKSigma(0.0))
            .unwrap();
        assert!((t - 3.0).abs() < 1e-12);
        let t = select_threshold(&table(&[2.0, 4.0]), ThresholdHeuristic::MeanPlusKSigma(1.0))
            .unwrap();
        assert!((t - 4.0).abs() < 1e-12); // population std of [2,4] is 1
    }

    #[test]
    fn classification_is_strictly_greater_than() {
        let scores = table(&[0.1, 0.5, 0.9]);
        let pred = classify(&scores, 0.5);
        assert!(!pred.by_case["c0"]);
        assert!(!pred.by_case["c1"], "error equal to threshold is normal");
        assert!(pred.by_case["c2"]);

        let all = classify(&scores, -1.0);
        assert!(all.by_case.values().all(|&v| v));
        let none = classify(&scores, f64::INFINITY);
        assert!(none.by_case.values().all(|&v| !v));
    }

    #[test]
    fn metrics_match_hand_computed_example() {
        // TP=6, FP=2, FN=4, TN=3
        let mut entries = Vec::new();
        let mut actual = BTreeMap::new();
        let mut add = |id: String, err: f64, anom: bool| {
            entries.push(ScoreEntry {
                case_id: id.clone(),
                error: err,
            });
            actual.insert(id, anom);
        };
        for i in 0..6 {
            add(format!("tp{i}"), 1.0, true);
        }
        for i in 0..2 {
            add(format!("fp{i}"), 1.0, false);
        }
        for i in 0..4 {
            add(format!("fn{i}"), 0.1, true);
        }
        for i in 0..3 {
            add(format!("tn{i}"), 0.1, false);
        }
        let scores = ScoreTable::new("m", entries).unwrap();
        let pred = classify(&scores, 0.5);
        let truth = truth_from(&pred, |k| actual[k]);
        let report = metrics(&pred, &truth, &BTreeSet::new()).unwrap();

        assert_eq!(report.true_positives, 6);
        assert_eq!(report.false_positives, 2);
        assert_eq!(report.false_negatives, 4);
        assert_eq!(report.true_negatives, 3);
        assert!((report.precision - 0.75).abs() < 1e-12);
        assert!((report.recall - 0.6).abs() < 1e-12);
        assert!((report.f1 - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(report.case_count(), 15);

        let recomputed = 2.0 * report.precision * report.recall
            / (report.precision + report.recall);
        assert!((report.f1 - recomputed).abs() < 1e-12);
    }

    #[test]
    fn zero_over_zero_is_zero() {
        let scores = table(&[0.1, 0.2]);
        let pred = classify(&scores, 1.0); // nothing flagged
        let truth = truth_from(&pred, |_| false); // nothing anomalous
        let report = metrics(&pred, &truth, &BTreeSet::new()).unwrap();
        assert_eq!(report.precision, 0.0);
        assert_eq!(report.recall, 0.0);
        assert_eq!(report.f1, 0.0);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let scores = table(&[0.1, 0.9, 0.1, 0.9]);
        let pred = classify(&scores, 0.5);
        let truth = truth_from(&pred, |k| pred.by_case[k]);
        let report = metrics(&pred, &truth, &BTreeSet::new()).unwrap();
        assert_eq!(report.f1, 1.0);
        assert_eq!(report.false_positives, 0);
        assert_eq!(report.false_negatives, 0);
    }

    #[test]
    fn recall_at_extreme_thresholds() {
        let scores = table(&[0.1, 0.5, 0.9, 1.4]);
        let truth = truth_from(&classify(&scores, 0.0), |k| k == "c1" || k == "c3");

        let low = metrics(&classify(&scores, -1.0), &truth, &BTreeSet::new()).unwrap();
        assert_eq!(low.recall, 1.0);
        let high = metrics(&classify(&scores, f64::INFINITY), &truth, &BTreeSet::new()).unwrap();
        assert_eq!(high.recall, 0.0);
    }

    #[test]
    fn case_set_mismatch_is_an_argument_error() {
        let pred = classify(&table(&[0.1]), 0.5);
        let mut truth = truth_from(&pred, |_| false);
        truth.insert("extra".into(), Label::Normal);
        assert!(matches!(
            metrics(&pred, &truth, &BTreeSet::new()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn rare_conformant_group_is_reported_separately() {
        let scores = table(&[0.9, 0.9, 0.1, 0.1, 0.9]);
        let pred = classify(&scores, 0.5); // c0,c1,c4 flagged
        let truth = truth_from(&pred, |k| k == "c4"); // only c4 truly anomalous
        let rare: BTreeSet<String> = ["c0", "c2"].iter().map(|s| s.to_string()).collect();
        let report = metrics(&pred, &truth, &rare).unwrap();

        let rare_stats = &report.groups["rare_conformant"];
        assert_eq!(rare_stats.cases, 2);
        assert_eq!(rare_stats.flagged, 1); // c0 is a false positive
        assert!((rare_stats.flagged_rate - 0.5).abs() < 1e-12);

        let normal_stats = &report.groups["normal"];
        assert_eq!(normal_stats.cases, 2); // c1, c3
        assert_eq!(normal_stats.flagged, 1); // c1
        let anomalous_stats = &report.groups["anomalous"];
        assert_eq!(anomalous_stats.cases, 1);
        assert_eq!(anomalous_stats.flagged, 1);

        let total: usize = report.groups.values().map(|g| g.cases).sum();
        assert_eq!(total, report.case_count());
    }

    #[test]
    fn thresholds_are_scale_equivariant() {
        let errors = [0.05, 0.1, 0.12, 0.3, 0.8, 0.85];
        let scaled: Vec<f64> = errors.iter().map(|e| e * 3.7).collect();
        let base = table(&errors);
        let big = table(&scaled);

        for heuristic in [
            ThresholdHeuristic::Percentile(75.0),
            ThresholdHeuristic::MeanPlusKSigma(1.5),
        ] {
            let t1 = select_threshold(&base, heuristic).unwrap();
            let t2 = select_threshold(&big, heuristic).unwrap();
            assert!((t2 - 3.7 * t1).abs() < 1e-9, "{heuristic:?}");
        }

        // labels unchanged under scaling for every heuristic
        for heuristic in [
            ThresholdHeuristic::Elbow,
            ThresholdHeuristic::Percentile(75.0),
            ThresholdHeuristic::MeanPlusKSigma(1.5),
        ] {
            let t1 = select_threshold(&base, heuristic).unwrap();
            let t2 = select_threshold(&big, heuristic).unwrap();
            let p1 = classify(&base, t1);
            let p2 = classify(&big, t2);
            assert_eq!(p1.by_case, p2.by_case, "{heuristic:?}");
        }
    }

    #[test]
    fn scores_csv_shape() {
        let scores = table(&[0.25, 0.5]);
        let mut buf = Vec::new();
        write_scores_csv(&scores, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "case_id,score\nc0,0.25\nc1,0.5\n"
        );
    }
}
