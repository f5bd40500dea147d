//! Seeded anomaly injection: mutates a chosen fraction of cases with one
//! of six control-flow/attribute anomaly types and keeps ground-truth
//! labels plus the pre-injection traces for audit.

use crate::eventlog::{EventLog, Trace};
use crate::rng::Stream;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

/// The injected anomaly taxonomy. Span lengths and shift distances are
/// drawn in `1..=2`, keeping mutations subtle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyType {
    /// Remove 1–2 consecutive events.
    Skip,
    /// Add 1–2 random activities at random positions.
    Insert,
    /// Duplicate a 1–2 event subsequence immediately after itself.
    Rework,
    /// Move one event 1–2 positions earlier.
    Early,
    /// Move one event 1–2 positions later.
    Late,
    /// Replace one event's resource with a different one.
    AttributeSwap,
}

pub const ALL_ANOMALY_TYPES: [AnomalyType; 6] = [
    AnomalyType::Skip,
    AnomalyType::Insert,
    AnomalyType::Rework,
    AnomalyType::Early,
    AnomalyType::Late,
    AnomalyType::AttributeSwap,
];

impl fmt::Display for AnomalyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AnomalyType::Skip => "skip",
            AnomalyType::Insert => "insert",
            AnomalyType::Rework => "rework",
            AnomalyType::Early => "early",
            AnomalyType::Late => "late",
            AnomalyType::AttributeSwap => "attribute_swap",
        };
        f.write_str(s)
    }
}

impl FromStr for AnomalyType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "skip" => Ok(AnomalyType::Skip),
            "insert" => Ok(AnomalyType::Insert),
            "rework" => Ok(AnomalyType::Rework),
            "early" => Ok(AnomalyType::Early),
            "late" => Ok(AnomalyType::Late),
            "attribute_swap" | "attributeswap" => Ok(AnomalyType::AttributeSwap),
            other => Err(Error::Argument(format!(
                "unknown anomaly type '{other}' (expected one of skip, insert, rework, early, late, attribute_swap)"
            ))),
        }
    }
}

/// Ground-truth label for one case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Normal,
    Anomalous(AnomalyType),
}

impl Label {
    pub fn is_anomalous(&self) -> bool {
        matches!(self, Label::Anomalous(_))
    }
}

/// A post-injection log with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLog {
    pub log: EventLog,
    /// case id → ground-truth label; covers every case.
    pub labels: BTreeMap<String, Label>,
    /// Pre-injection traces, keyed by case id, for audit.
    pub originals: BTreeMap<String, Trace>,
}

impl LabeledLog {
    pub fn anomalous_count(&self) -> usize {
        self.labels.values().filter(|l| l.is_anomalous()).count()
    }
}

/// Alphabets the mutations draw from, collected once per log.
struct InjectContext {
    activities: Vec<String>,
    resources: Vec<String>,
}

impl InjectContext {
    fn from_log(log: &EventLog) -> Self {
        let mut activities = BTreeSet::new();
        let mut resources = BTreeSet::new();
        for trace in &log.traces {
            for event in &trace.events {
                activities.insert(event.activity.clone());
                if let Some(r) = &event.resource {
                    resources.insert(r.clone());
                }
            }
        }
        InjectContext {
            activities: activities.into_iter().collect(),
            resources: resources.into_iter().collect(),
        }
    }
}

/// Mutates `round(fraction·|log|)` uniformly chosen cases, each with one
/// uniformly chosen type from `types`. A mutation must change the trace;
/// after 10 unsuccessful draws the remaining types are tried in turn.
/// Deterministic given the rng stream.
pub fn inject(
    log: &EventLog,
    fraction: f64,
    types: &[AnomalyType],
    rng: &mut Stream,
) -> Result<LabeledLog> {
    if !(0.0..=1.0).contains(&fraction) || !fraction.is_finite() {
        return Err(Error::Argument(format!(
            "anomaly fraction must be in [0,1], got {fraction}"
        )));
    }
    if types.is_empty() {
        return Err(Error::Argument("anomaly type set must be non-empty".into()));
    }
    let mut seen = BTreeSet::new();
    for trace in &log.traces {
        if !seen.insert(trace.case_id.as_str()) {
            return Err(Error::Argument(format!(
                "duplicate case id '{}': labels are keyed by case id",
                trace.case_id
            )));
        }
    }
    // dedupe while keeping caller order so the uniform type draw is fair
    let mut type_pool: Vec<AnomalyType> = Vec::new();
    for t in types {
        if !type_pool.contains(t) {
            type_pool.push(*t);
        }
    }

    let ctx = InjectContext::from_log(log);
    let n = log.len();
    let count = (fraction * n as f64).round() as usize;
    let mut selected = rand::seq::index::sample(rng, n, count).into_vec();
    selected.sort_unstable();

    let mut mutated_log = log.clone();
    let mut labels: BTreeMap<String, Label> = log
        .traces
        .iter()
        .map(|t| (t.case_id.clone(), Label::Normal))
        .collect();
    let originals: BTreeMap<String, Trace> = log
        .traces
        .iter()
        .map(|t| (t.case_id.clone(), t.clone()))
        .collect();

    for idx in selected {
        let original = &log.traces[idx];
        let (mutated, applied) = mutate_trace(original, &type_pool, &ctx, rng)?;
        labels.insert(original.case_id.clone(), Label::Anomalous(applied));
        mutated_log.traces[idx] = mutated;
    }

    Ok(LabeledLog {
        log: mutated_log,
        labels,
        originals,
    })
}

/// Applies the first type (uniformly drawn, then the rest in pool order)
/// that yields a changed trace within 10 draws.
fn mutate_trace(
    original: &Trace,
    type_pool: &[AnomalyType],
    ctx: &InjectContext,
    rng: &mut Stream,
) -> Result<(Trace, AnomalyType)> {
    let first = rng.gen_range(0..type_pool.len());
    for offset in 0..type_pool.len() {
        let ty = type_pool[(first + offset) % type_pool.len()];
        for _ in 0..10 {
            if let Some(candidate) = apply_anomaly(original, ty, ctx, rng) {
                if candidate.events != original.events {
                    return Ok((candidate, ty));
                }
            } else {
                break; // structurally inapplicable; redraws won't help
            }
        }
    }
    Err(Error::Injection(format!(
        "case '{}' (length {}) admits no mutation from the requested types",
        original.case_id,
        original.len()
    )))
}

/// One mutation attempt; `None` when the type cannot apply to this trace.
fn apply_anomaly(
    trace: &Trace,
    ty: AnomalyType,
    ctx: &InjectContext,
    rng: &mut Stream,
) -> Option<Trace> {
    let len = trace.len();
    let mut out = trace.clone();
    match ty {
        AnomalyType::Skip => {
            if len < 2 {
                return None;
            }
            let span = rng.gen_range(1..=2.min(len - 1));
            let start = rng.gen_range(0..=len - span);
            out.events.drain(start..start + span);
        }
        AnomalyType::Insert => {
            if ctx.activities.is_empty() {
                return None;
            }
            let span = rng.gen_range(1..=2);
            for _ in 0..span {
                let activity = ctx.activities.choose(rng).expect("checked non-empty");
                let mut event = crate::eventlog::Event::new(activity.clone());
                if let Some(resource) = ctx.resources.choose(rng) {
                    event = event.with_resource(resource.clone());
                }
                let pos = rng.gen_range(0..=out.events.len());
                out.events.insert(pos, event);
            }
        }
        AnomalyType::Rework => {
            if len == 0 {
                return None;
            }
            let span = rng.gen_range(1..=2.min(len));
            let start = rng.gen_range(0..=len - span);
            let copy: Vec<_> = out.events[start..start + span].to_vec();
            for (k, event) in copy.into_iter().enumerate() {
                out.events.insert(start + span + k, event);
            }
        }
        AnomalyType::Early => {
            if len < 2 {
                return None;
            }
            let idx = rng.gen_range(1..len);
            let dist = rng.gen_range(1..=2);
            let target = idx.saturating_sub(dist);
            let event = out.events.remove(idx);
            out.events.insert(target, event);
        }
        AnomalyType::Late => {
            if len < 2 {
                return None;
            }
            let idx = rng.gen_range(0..len - 1);
            let dist = rng.gen_range(1..=2);
            let target = (idx + dist).min(len - 1);
            let event = out.events.remove(idx);
            out.events.insert(target, event);
        }
        AnomalyType::AttributeSwap => {
            if len == 0 {
                return None;
            }
            let idx = rng.gen_range(0..len);
            let current = out.events[idx].resource.clone();
            let pool: Vec<&String> = ctx
                .resources
                .iter()
                .filter(|r| Some(r.as_str()) != current.as_deref())
                .collect();
            let replacement = pool.choose(rng)?;
            out.events[idx].resource = Some((**replacement).clone());
        }
    }
    Some(out)
}

/// Writes ground truth as CSV:
/// `case_id, label, anomaly_type, original_length, mutated_length`.
pub fn write_labels<W: Write>(labeled: &LabeledLog, mut w: W) -> Result<()> {
    writeln!(w, "case_id,label,anomaly_type,original_length,mutated_length")?;
    for trace in &labeled.log.traces {
        let label = labeled.labels[&trace.case_id];
        let original_len = labeled.originals[&trace.case_id].len();
        let (kind, ty) = match label {
            Label::Normal => ("normal", String::new()),
            Label::Anomalous(t) => ("anomalous", t.to_string()),
        };
        writeln!(
            w,
            "{},{},{},{},{}",
            trace.case_id,
            kind,
            ty,
            original_len,
            trace.len()
        )?;
    }
    Ok(())
}

/// Reads a labels CSV back into a case id → label map. Extra columns are
/// ignored so the audit columns stay optional.
pub fn read_labels<R: Read>(r: R) -> Result<BTreeMap<String, Label>> {
    let reader = BufReader::new(r);
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(Error::Schema("labels file is empty".into())),
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let case_col = cols.iter().position(|c| *c == "case_id").ok_or_else(|| {
        Error::Schema("labels file is missing required column 'case_id'".into())
    })?;
    let label_col = cols
        .iter()
        .position(|c| *c == "label")
        .ok_or_else(|| Error::Schema("labels file is missing required column 'label'".into()))?;
    let type_col = cols.iter().position(|c| *c == "anomaly_type");

    let mut labels = BTreeMap::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |col: usize| -> Result<&str> {
            fields.get(col).copied().ok_or_else(|| Error::Parse {
                line: Some(i + 1),
                msg: format!("expected at least {} fields, got {}", col + 1, fields.len()),
            })
        };
        let case_id = get(case_col)?.to_string();
        let label = match get(label_col)? {
            "normal" => Label::Normal,
            "anomalous" => {
                let ty = match type_col {
                    Some(col) => get(col)?.parse()?,
                    None => AnomalyType::Insert,
                };
                Label::Anomalous(ty)
            }
            other => {
                return Err(Error::Parse {
                    line: Some(i + 1),
                    msg: format!("unknown label '{other}' (expected normal|anomalous)"),
                })
            }
        };
        labels.insert(case_id, label);
    }
    if labels.is_empty() {
        return Err(Error::Schema("labels file has no data rows".into()));
    }
    Ok(labels)
}
