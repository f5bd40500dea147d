//! Event-log data model, CSV/XES ingestion, and a seeded synthetic
//! generator built on a likelihood graph with a designated rare branch.
//!
//! Logs are plain value types: a log owns its traces, a trace owns its
//! events. Vocabularies map activity/resource labels to dense indices with
//! a reserved `PAD` label at index 0, which later gives the decoder a
//! well-defined target at padded positions.

use crate::rng::{self};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// Reserved padding label, always at vocabulary index 0.
pub const PAD: &str = "PAD";

/// One event: an activity label plus optional resource and timestamp.
///
/// Timestamps carry ordering information only and are stored as integer
/// milliseconds since the Unix epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub activity: String,
    pub resource: Option<String>,
    pub timestamp: Option<i64>,
}

impl Event {
    pub fn new(activity: impl Into<String>) -> Self {
        Event {
            activity: activity.into(),
            resource: None,
            timestamp: None,
        }
    }

    pub fn with_resource(mut self, resource: impl Into<String>) -> Self {
        self.resource = Some(resource.into());
        self
    }

    pub fn with_timestamp(mut self, millis: i64) -> Self {
        self.timestamp = Some(millis);
        self
    }
}

/// An ordered sequence of events sharing a case id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub case_id: String,
    pub events: Vec<Event>,
}

impl Trace {
    pub fn new(case_id: impl Into<String>, events: Vec<Event>) -> Self {
        Trace {
            case_id: case_id.into(),
            events,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Activity labels in order.
    pub fn activities(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|e| e.activity.as_str())
    }
}

/// A collection of traces with unique case ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLog {
    pub traces: Vec<Trace>,
    /// Optional log name, carried through from the source where available.
    pub name: Option<String>,
    /// Source-format tag: "csv", "xes", or "synthetic".
    pub source: Option<String>,
}

impl EventLog {
    pub fn new(traces: Vec<Trace>) -> Self {
        EventLog {
            traces,
            name: None,
            source: None,
        }
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Total number of events across all traces.
    pub fn event_count(&self) -> usize {
        self.traces.iter().map(Trace::len).sum()
    }

    /// Length of the longest trace, 0 for an empty log.
    pub fn max_trace_len(&self) -> usize {
        self.traces.iter().map(Trace::len).max().unwrap_or(0)
    }
}

/// Dense label-to-index mapping with `PAD` pinned to index 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub activities: Vec<String>,
    pub resources: Vec<String>,
}

impl Vocabulary {
    pub fn activity_index(&self, label: &str) -> Option<usize> {
        self.activities.iter().position(|a| a == label)
    }

    pub fn resource_index(&self, label: &str) -> Option<usize> {
        self.resources.iter().position(|r| r == label)
    }

    pub fn n_activities(&self) -> usize {
        self.activities.len()
    }

    pub fn n_resources(&self) -> usize {
        self.resources.len()
    }

    /// Activity labels excluding `PAD`.
    pub fn real_activities(&self) -> &[String] {
        &self.activities[1..]
    }
}

/// Column-name mapping for CSV ingestion.
///
/// `case` and `activity` must be present in the header; `resource` and
/// `timestamp` are picked up when their columns exist and are treated as
/// absent otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub case: String,
    pub activity: String,
    pub resource: String,
    pub timestamp: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            case: "case_id".into(),
            activity: "activity".into(),
            resource: "resource".into(),
            timestamp: "timestamp".into(),
        }
    }
}

/// Result of parsing a log file: the log plus the number of events that
/// were skipped for missing required attributes (XES only).
#[derive(Debug)]
pub struct ParsedLog {
    pub log: EventLog,
    pub skipped_events: usize,
}

/// Parses CSV event data. Rows are grouped by case id in first-appearance
/// order; within a case, events are sorted by timestamp when every row of
/// the case has one (stable, so ties keep file order), otherwise file
/// order is kept.
pub fn parse_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<EventLog> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);

    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: Some(1),
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let case_col = col(&schema.case).ok_or_else(|| {
        Error::Schema(format!("missing required column '{}'", schema.case))
    })?;
    let act_col = col(&schema.activity).ok_or_else(|| {
        Error::Schema(format!("missing required column '{}'", schema.activity))
    })?;
    let res_col = col(&schema.resource);
    let ts_col = col(&schema.timestamp);

    let mut order: Vec<String> = Vec::new();
    let mut by_case: HashMap<String, Vec<Event>> = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: Some(i + 2),
            msg: e.to_string(),
        })?;
        let case_id = record.get(case_col).unwrap_or("").to_string();
        let activity = record.get(act_col).unwrap_or("").to_string();
        if activity.is_empty() {
            return Err(Error::Parse {
                line: Some(i + 2),
                msg: "empty activity label".into(),
            });
        }
        let resource = res_col
            .and_then(|c| record.get(c))
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        let timestamp = match ts_col.and_then(|c| record.get(c)).filter(|s| !s.is_empty()) {
            Some(raw) => Some(parse_timestamp(raw).map_err(|msg| Error::Parse {
                line: Some(i + 2),
                msg,
            })?),
            None => None,
        };
        if !by_case.contains_key(&case_id) {
            order.push(case_id.clone());
        }
        by_case.entry(case_id).or_default().push(Event {
            activity,
            resource,
            timestamp,
        });
    }

    if order.is_empty() {
        return Err(Error::EmptyLog("CSV contains no event rows".into()));
    }

    let traces = order
        .into_iter()
        .map(|case_id| {
            let mut events = by_case.remove(&case_id).expect("grouped above");
            if events.iter().all(|e| e.timestamp.is_some()) {
                events.sort_by_key(|e| e.timestamp);
            }
            Trace { case_id, events }
        })
        .collect();

    Ok(EventLog {
        traces,
        name: None,
        source: Some("csv".into()),
    })
}

/// Accepts integer epoch milliseconds or an RFC 3339 datetime.
fn parse_timestamp(raw: &str) -> std::result::Result<i64, String> {
    if let Ok(ms) = raw.parse::<i64>() {
        return Ok(ms);
    }
    chrono::DateTime::parse_from_rfc3339(raw)
        .map(|dt| dt.timestamp_millis())
        .map_err(|e| format!("bad timestamp '{raw}': {e}"))
}

/// Writes a log as CSV with the default column set. Missing resources and
/// timestamps serialize as empty fields; timestamps as epoch milliseconds.
pub fn write_csv<W: Write>(log: &EventLog, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["case_id", "activity", "resource", "timestamp"])
        .map_err(csv_io)?;
    for trace in &log.traces {
        for event in &trace.events {
            wtr.write_record([
                trace.case_id.as_str(),
                event.activity.as_str(),
                event.resource.as_deref().unwrap_or(""),
                &event.timestamp.map(|t| t.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_io)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Parse {
        line: None,
        msg: e.to_string(),
    }
}

/// Parses the XES subset used here: per-event `concept:name`,
/// `org:resource`, and `time:timestamp`; per-trace `concept:name` as the
/// case id (falling back to `trace_{i}`). Events without an activity are
/// skipped and counted.
// `unescape_value`'s suggested replacement takes a namespace resolver we
// have no use for; XES attribute values only need entity unescaping.
#[allow(deprecated)]
pub fn parse_xes<R: Read>(mut reader: R) -> Result<ParsedLog> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let mut xml = quick_xml::Reader::from_str(&text);
    xml.config_mut().trim_text(true);

    let line_of = |pos: u64| Some(text[..(pos as usize).min(text.len())].matches('\n').count() + 1);

    let mut traces: Vec<Trace> = Vec::new();
    let mut skipped = 0usize;
    let mut in_trace = false;
    let mut in_event = false;
    let mut case_id: Option<String> = None;
    let mut events: Vec<Event> = Vec::new();
    let mut activity: Option<String> = None;
    let mut resource: Option<String> = None;
    let mut timestamp: Option<i64> = None;

    loop {
        use quick_xml::events::Event as Xml;
        let ev = xml.read_event().map_err(|e| Error::Parse {
            line: line_of(xml.buffer_position()),
            msg: e.to_string(),
        })?;
        match ev {
            Xml::Start(ref tag) | Xml::Empty(ref tag) => {
                let empty = matches!(ev, Xml::Empty(_));
                match tag.local_name().as_ref() {
                    "trace" => {
                        in_trace = true;
                        case_id = None;
                        events.clear();
                        if empty {
                            push_trace(&mut traces, &mut case_id, &mut events);
                            in_trace = false;
                        }
                    }
                    "event" if in_trace => {
                        in_event = true;
                        activity = None;
                        resource = None;
                        timestamp = None;
                        if empty {
                            in_event = false;
                            skipped += 1; // no attributes at all
                        }
                    }
                    "string" | "date" | "int" | "float" | "boolean" => {
                        let mut key = None;
                        let mut value = None;
                        for attr in tag.attributes().flatten() {
                            let v = attr
                                .unescape_value()
                                .map_err(|e| Error::Parse {
                                    line: line_of(xml.buffer_position()),
                                    msg: e.to_string(),
                                })?
                                .into_owned();
                            match attr.key.as_ref() {
                                "key" => key = Some(v),
                                "value" => value = Some(v),
                                _ => {}
                            }
                        }
                        if let (Some(key), Some(value)) = (key, value) {
                            if in_event {
                                match key.as_str() {
                                    "concept:name" => activity = Some(value),
                                    "org:resource" => resource = Some(value),
                                    "time:timestamp" => {
                                        timestamp = Some(parse_timestamp(&value).map_err(
                                            |msg| Error::Parse {
                                                line: line_of(xml.buffer_position()),
                                                msg,
                                            },
                                        )?);
                                    }
                                    _ => {}
                                }
                            } else if in_trace && key == "concept:name" {
                                case_id = Some(value);
                            }
                        }
                    }
                    _ => {}
                }
            }
            Xml::End(ref tag) => match tag.local_name().as_ref() {
                "event" if in_event => {
                    in_event = false;
                    match activity.take() {
                        Some(activity) => events.push(Event {
                            activity,
                            resource: resource.take(),
                            timestamp: timestamp.take(),
                        }),
                        None => skipped += 1,
                    }
                }
                "trace" if in_trace => {
                    in_trace = false;
                    push_trace(&mut traces, &mut case_id, &mut events);
                }
                _ => {}
            },
            Xml::Eof => break,
            _ => {}
        }
    }

    Ok(ParsedLog {
        log: EventLog {
            traces,
            name: None,
            source: Some("xes".into()),
        },
        skipped_events: skipped,
    })
}

fn push_trace(traces: &mut Vec<Trace>, case_id: &mut Option<String>, events: &mut Vec<Event>) {
    let case_id = case_id
        .take()
        .unwrap_or_else(|| format!("trace_{}", traces.len()));
    traces.push(Trace {
        case_id,
        events: std::mem::take(events),
    });
}

/// Supported on-disk log formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    Csv,
    Xes,
}

/// Chooses format by extension (`.csv` / `.xes`, optionally `.gz`-suffixed).
pub fn detect_format(path: &Path) -> Result<LogFormat> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    let stem = name.strip_suffix(".gz").unwrap_or(&name);
    if stem.ends_with(".csv") {
        Ok(LogFormat::Csv)
    } else if stem.ends_with(".xes") {
        Ok(LogFormat::Xes)
    } else {
        Err(Error::Argument(format!(
            "cannot infer log format from '{name}' (expected .csv/.xes, optionally .gz)"
        )))
    }
}

/// Opens a log file, transparently decompressing `.gz`.
pub fn open_reader(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = std::fs::File::open(path)?;
    let is_gz = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    if is_gz {
        Ok(Box::new(BufReader::new(flate2::read::GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Reads a log from disk, detecting format and compression by extension.
pub fn read_log(path: &Path, schema: &CsvSchema) -> Result<ParsedLog> {
    let reader = open_reader(path)?;
    match detect_format(path)? {
        LogFormat::Csv => Ok(ParsedLog {
            log: parse_csv(reader, schema)?,
            skipped_events: 0,
        }),
        LogFormat::Xes => parse_xes(reader),
    }
}

/// Writes a log to disk as CSV with the default columns, gzip-compressed
/// when the path ends in `.gz`. XES output is not supported.
pub fn write_log(log: &EventLog, path: &Path) -> Result<()> {
    if detect_format(path)? == LogFormat::Xes {
        return Err(Error::Unsupported(
            "XES is read-only; write logs as .csv or .csv.gz".into(),
        ));
    }
    let file = std::fs::File::create(path)?;
    let is_gz = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    if is_gz {
        let enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        write_csv(log, std::io::BufWriter::new(enc))
    } else {
        write_csv(log, std::io::BufWriter::new(file))
    }
}

/// Builds the vocabulary of a log: `PAD` first, then distinct labels in
/// first-occurrence order. Deterministic for a fixed log.
pub fn build_vocab(log: &EventLog) -> Result<Vocabulary> {
    if log.is_empty() {
        return Err(Error::EmptyLog("cannot build vocabulary of empty log".into()));
    }
    let mut activities = vec![PAD.to_string()];
    let mut resources = vec![PAD.to_string()];
    for trace in &log.traces {
        for event in &trace.events {
            if !activities.contains(&event.activity) {
                activities.push(event.activity.clone());
            }
            if let Some(r) = &event.resource {
                if !resources.contains(r) {
                    resources.push(r.clone());
                }
            }
        }
    }
    Ok(Vocabulary {
        activities,
        resources,
    })
}

/// Keeps exactly the traces with length at most `max_len`, preserving order.
pub fn filter_by_length(log: &EventLog, max_len: usize) -> EventLog {
    EventLog {
        traces: log
            .traces
            .iter()
            .filter(|t| t.len() <= max_len)
            .cloned()
            .collect(),
        name: log.name.clone(),
        source: log.source.clone(),
    }
}

/// Process model for synthetic log generation: a directed graph of
/// activities with outgoing-edge probabilities, plus one designated rare
/// route whose traces are injected by exact count rather than sampled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LikelihoodGraph {
    pub nodes: Vec<String>,
    /// `(from, to, probability)`; probabilities out of a node sum to 1.
    pub edges: Vec<(String, String, f64)>,
    pub start: String,
    pub ends: Vec<String>,
    /// Activity → resources drawn uniformly when the activity occurs.
    pub resource_pools: HashMap<String, Vec<String>>,
    /// Node path from `start` to an end node reserved for rare traces.
    pub rare_route: Vec<String>,
    /// Activities exclusive to the rare variant; ordinary sampling never
    /// enters them.
    pub rare_only: Vec<String>,
    /// Hard cap on generated trace length, enforced by resampling.
    pub max_len: usize,
}

impl LikelihoodGraph {
    /// Checks structural invariants: probabilities sum to 1 ± 1e-9 per
    /// node, all referenced nodes exist, and the rare route is a valid
    /// start-to-end path.
    pub fn validate(&self) -> Result<()> {
        let known = |n: &String| self.nodes.contains(n);
        if !known(&self.start) {
            return Err(Error::Argument(format!("unknown start node '{}'", self.start)));
        }
        for end in &self.ends {
            if !known(end) {
                return Err(Error::Argument(format!("unknown end node '{end}'")));
            }
        }
        let mut totals: HashMap<&str, f64> = HashMap::new();
        for (from, to, p) in &self.edges {
            if !known(from) || !known(to) {
                return Err(Error::Argument(format!("edge {from}->{to} uses unknown node")));
            }
            if !(*p > 0.0) {
                return Err(Error::Argument(format!(
                    "edge {from}->{to} has non-positive probability {p}"
                )));
            }
            *totals.entry(from.as_str()).or_default() += p;
        }
        for (node, total) in totals {
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Argument(format!(
                    "outgoing probabilities of '{node}' sum to {total}, expected 1"
                )));
            }
        }
        if self.rare_route.len() < 2
            || self.rare_route.first() != Some(&self.start)
            || !self.ends.contains(self.rare_route.last().expect("non-empty"))
        {
            return Err(Error::Argument(
                "rare route must run from the start node to an end node".into(),
            ));
        }
        for pair in self.rare_route.windows(2) {
            if !self
                .edges
                .iter()
                .any(|(f, t, _)| f == &pair[0] && t == &pair[1])
            {
                return Err(Error::Argument(format!(
                    "rare route step {}->{} has no edge",
                    pair[0], pair[1]
                )));
            }
        }
        for node in &self.rare_only {
            if !self.rare_route.contains(node) {
                return Err(Error::Argument(format!(
                    "rare-only activity '{node}' is not on the rare route"
                )));
            }
        }
        Ok(())
    }
}

/// The built-in review-process model: 12 activities, an XOR split with
/// probabilities 0.7/0.3, a revise-review loop with 0.2 re-entry, and a
/// rare experimental route (`DevelopMethod` → `RunExperiments` →
/// `FinalDecision`) that ordinary sampling never takes.
pub fn default_graph() -> LikelihoodGraph {
    let edge = |f: &str, t: &str, p: f64| (f.to_string(), t.to_string(), p);
    let pool = |a: &str, rs: &[&str]| {
        (
            a.to_string(),
            rs.iter().map(|r| r.to_string()).collect::<Vec<_>>(),
        )
    };
    LikelihoodGraph {
        nodes: [
            "SubmitDraft",
            "InitialCheck",
            "AssignReviewer",
            "Review",
            "ReviseDraft",
            "QualityAudit",
            "Approve",
            "Publish",
            "Archive",
            "DevelopMethod",
            "RunExperiments",
            "FinalDecision",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        edges: vec![
            edge("SubmitDraft", "InitialCheck", 1.0),
            // XOR split: restricted to the non-rare branches this
            // renormalizes to exactly 0.7 / 0.3
            edge("InitialCheck", "AssignReviewer", 0.665),
            edge("InitialCheck", "QualityAudit", 0.285),
            edge("InitialCheck", "DevelopMethod", 0.05),
            edge("AssignReviewer", "Review", 1.0),
            // loop: Review -> ReviseDraft -> Review with 0.2 re-entry
            edge("Review", "ReviseDraft", 0.2),
            edge("Review", "Approve", 0.8),
            edge("ReviseDraft", "Review", 1.0),
            edge("QualityAudit", "Approve", 1.0),
            edge("Approve", "Publish", 1.0),
            edge("Publish", "Archive", 1.0),
            edge("DevelopMethod", "RunExperiments", 1.0),
            edge("RunExperiments", "FinalDecision", 1.0),
            edge("FinalDecision", "Archive", 1.0),
        ],
        start: "SubmitDraft".into(),
        ends: vec!["Archive".into()],
        resource_pools: [
            pool("SubmitDraft", &["author_ada", "author_ben", "author_cy"]),
            pool("InitialCheck", &["clerk_dot", "clerk_eli"]),
            pool("AssignReviewer", &["editor_fay"]),
            pool("Review", &["rev_gus", "rev_hana", "rev_ivo"]),
            pool("ReviseDraft", &["author_ada", "author_ben", "author_cy"]),
            pool("QualityAudit", &["audit_jo", "audit_kim"]),
            pool("Approve", &["editor_fay", "editor_lou"]),
            pool("Publish", &["system"]),
            pool("Archive", &["system"]),
            pool("DevelopMethod", &["sci_mia", "sci_noa"]),
            pool("RunExperiments", &["sci_mia", "sci_noa", "lab_bot"]),
            pool("FinalDecision", &["board_om", "board_pia"]),
        ]
        .into_iter()
        .collect(),
        rare_route: vec![
            "SubmitDraft".into(),
            "InitialCheck".into(),
            "DevelopMethod".into(),
            "RunExperiments".into(),
            "FinalDecision".into(),
            "Archive".into(),
        ],
        rare_only: vec![
            "DevelopMethod".into(),
            "RunExperiments".into(),
            "FinalDecision".into(),
        ],
        max_len: 16,
    }
}

const GENERATED_EPOCH_MS: i64 = 1_767_600_000_000; // early January 2026
const CASE_SPACING_MS: i64 = 3_600_000;
const EVENT_SPACING_MS: i64 = 60_000;

/// Generates `n_cases` traces from the graph: exactly `rare_count` of them
/// follow the rare route (at seeded-random case positions); the rest are
/// random walks over the non-rare edges with probabilities renormalized.
/// Deterministic given `(graph, n_cases, rare_count, seed)`.
pub fn generate_log(
    graph: &LikelihoodGraph,
    n_cases: usize,
    rare_count: usize,
    seed: u64,
) -> Result<EventLog> {
    graph.validate()?;
    if n_cases == 0 {
        return Err(Error::Argument("n_cases must be positive".into()));
    }
    if rare_count > n_cases {
        return Err(Error::Argument(format!(
            "rare_count {rare_count} exceeds n_cases {n_cases}"
        )));
    }

    // which case slots carry rare traces
    let mut slot_rng = rng::substream(seed, "generate.rare-slots");
    let mut slots: Vec<usize> = (0..n_cases).collect();
    slots.shuffle(&mut slot_rng);
    let mut rare_slot = vec![false; n_cases];
    for &s in &slots[..rare_count] {
        rare_slot[s] = true;
    }

    let banned: Vec<&String> = graph.rare_only.iter().collect();
    let mut walk_rng = rng::substream(seed, "generate.walk");
    let width = n_cases.to_string().len().max(4);
    let mut traces = Vec::with_capacity(n_cases);
    for case in 0..n_cases {
        let route: Vec<String> = if rare_slot[case] {
            graph.rare_route.clone()
        } else {
            sample_route(graph, &banned, &mut walk_rng)?
        };
        let mut events = Vec::with_capacity(route.len());
        for (i, activity) in route.iter().enumerate() {
            let resource = graph.resource_pools.get(activity).and_then(|pool| {
                if pool.is_empty() {
                    None
                } else {
                    Some(pool[walk_rng.gen_range(0..pool.len())].clone())
                }
            });
            events.push(Event {
                activity: activity.clone(),
                resource,
                timestamp: Some(
                    GENERATED_EPOCH_MS
                        + case as i64 * CASE_SPACING_MS
                        + i as i64 * EVENT_SPACING_MS,
                ),
            });
        }
        traces.push(Trace {
            case_id: format!("case_{case:0width$}"),
            events,
        });
    }

    Ok(EventLog {
        traces,
        name: Some("synthetic".into()),
        source: Some("synthetic".into()),
    })
}

fn sample_route(
    graph: &LikelihoodGraph,
    banned: &[&String],
    rng: &mut rng::Stream,
) -> Result<Vec<String>> {
    const MAX_ATTEMPTS: usize = 10_000;
    'attempt: for _ in 0..MAX_ATTEMPTS {
        let mut route = vec![graph.start.clone()];
        let mut node = graph.start.clone();
        while !graph.ends.contains(&node) {
            if route.len() >= graph.max_len {
                continue 'attempt; // over budget: resample the whole walk
            }
            let choices: Vec<(&String, f64)> = graph
                .edges
                .iter()
                .filter(|(f, t, _)| f == &node && !banned.iter().any(|b| *b == t))
                .map(|(_, t, p)| (t, *p))
                .collect();
            if choices.is_empty() {
                return Err(Error::Argument(format!(
                    "node '{node}' has no non-rare outgoing edges"
                )));
            }
            let total: f64 = choices.iter().map(|(_, p)| p).sum();
            let mut draw = rng.gen_range(0.0..total);
            let mut next = choices[choices.len() - 1].0;
            for (t, p) in &choices {
                if draw < *p {
                    next = t;
                    break;
                }
                draw -= p;
            }
            node = next.clone();
            route.push(node.clone());
        }
        return Ok(route);
    }
    Err(Error::Domain(format!(
        "could not sample a trace within max length {} after {MAX_ATTEMPTS} attempts",
        graph.max_len
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_csv() -> &'static str {
        "case_id,activity,resource,timestamp\n\
         c1,A,alice,100\n\
         c1,B,bob,200\n\
         c2,A,,300\n"
    }

    #[test]
    fn parse_csv_groups_by_case() {
        let log = parse_csv(sample_csv().as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.traces[0].case_id, "c1");
        assert_eq!(log.traces[0].len(), 2);
        assert_eq!(log.traces[1].len(), 1);
        assert_eq!(log.traces[1].events[0].resource, None);
    }

    #[test]
    fn parse_csv_sorts_by_timestamp_within_case() {
        let csv = "case_id,activity,resource,timestamp\n\
                   c1,B,,200\n\
                   c1,A,,100\n";
        let log = parse_csv(csv.as_bytes(), &CsvSchema::default()).unwrap();
        let acts: Vec<&str> = log.traces[0].activities().collect();
        assert_eq!(acts, ["A", "B"]);
    }

    #[test]
    fn parse_csv_accepts_rfc3339_timestamps() {
        let csv = "case_id,activity,timestamp\n\
                   c1,A,2026-01-05T08:00:00+00:00\n";
        let log = parse_csv(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert!(log.traces[0].events[0].timestamp.is_some());
    }

    #[test]
    fn parse_csv_missing_activity_column_is_schema_error() {
        let csv = "case_id,action\nc1,A\n";
        let err = parse_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn parse_csv_empty_file_is_empty_log_error() {
        let csv = "case_id,activity,resource,timestamp\n";
        let err = parse_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyLog(_)));
    }

    #[test]
    fn csv_round_trip_preserves_log() {
        let log = parse_csv(sample_csv().as_bytes(), &CsvSchema::default()).unwrap();
        let mut buf = Vec::new();
        write_csv(&log, &mut buf).unwrap();
        let back = parse_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(log, back);
    }

    fn sample_xes() -> &'static str {
        r#"<?xml version="1.0" encoding="UTF-8"?>
<log>
  <trace>
    <string key="concept:name" value="c1"/>
    <event>
      <string key="concept:name" value="A"/>
      <string key="org:resource" value="alice"/>
      <date key="time:timestamp" value="2026-01-05T08:00:00+00:00"/>
    </event>
    <event>
      <string key="concept:name" value="B"/>
    </event>
    <event>
      <string key="concept:name" value="C"/>
      <string key="org:resource" value="bob"/>
    </event>
  </trace>
  <trace>
    <string key="concept:name" value="c2"/>
    <event><string key="concept:name" value="A"/></event>
    <event><string key="concept:name" value="B"/></event>
    <event><string key="concept:name" value="C"/></event>
  </trace>
</log>"#
    }

    #[test]
    fn parse_xes_maps_traces_and_events() {
        let parsed = parse_xes(sample_xes().as_bytes()).unwrap();
        assert_eq!(parsed.log.len(), 2);
        assert_eq!(parsed.log.event_count(), 6);
        assert_eq!(parsed.skipped_events, 0);
        assert_eq!(parsed.log.traces[0].case_id, "c1");
        assert_eq!(parsed.log.traces[0].events[1].resource, None);
        assert!(parsed.log.traces[0].events[0].timestamp.is_some());
    }

    #[test]
    fn parse_xes_skips_events_without_activity() {
        let xes = r#"<log><trace>
            <event><string key="org:resource" value="x"/></event>
            <event><string key="concept:name" value="A"/></event>
        </trace></log>"#;
        let parsed = parse_xes(xes.as_bytes()).unwrap();
        assert_eq!(parsed.log.traces[0].len(), 1);
        assert_eq!(parsed.skipped_events, 1);
        assert_eq!(parsed.log.traces[0].case_id, "trace_0");
    }

    #[test]
    fn parse_xes_truncated_is_parse_error() {
        let xes = "<log><trace><event><string key=\"concept:name\"";
        let err = parse_xes(xes.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn build_vocab_first_occurrence_order_with_pad() {
        let csv = "case_id,activity\nc1,A\nc1,B\nc2,A\nc2,C\n";
        let log = parse_csv(csv.as_bytes(), &CsvSchema::default()).unwrap();
        let vocab = build_vocab(&log).unwrap();
        assert_eq!(vocab.activities, ["PAD", "A", "B", "C"]);
        assert_eq!(vocab.resources, ["PAD"]);
        assert_eq!(build_vocab(&log).unwrap(), vocab);
    }

    #[test]
    fn filter_by_length_keeps_short_traces_in_order() {
        let mut log = EventLog::new(vec![
            Trace::new("a", vec![Event::new("X"); 3]),
            Trace::new("b", vec![Event::new("X"); 17]),
            Trace::new("c", vec![Event::new("X"); 5]),
        ]);
        log.source = Some("csv".into());
        let kept = filter_by_length(&log, 16);
        let lens: Vec<usize> = kept.traces.iter().map(Trace::len).collect();
        assert_eq!(lens, [3, 5]);
        assert_eq!(filter_by_length(&log, 17), log);
        assert!(filter_by_length(&log, 1).is_empty());
    }

    #[test]
    fn default_graph_is_valid() {
        let graph = default_graph();
        graph.validate().unwrap();
        assert!(graph.rare_only.iter().any(|a| a == "DevelopMethod"));
        assert!(graph.rare_only.iter().all(|a| graph.rare_route.contains(a)));
        let totals: std::collections::HashMap<&str, f64> =
            graph.edges.iter().fold(Default::default(), |mut m, (f, _, p)| {
                *m.entry(f.as_str()).or_default() += p;
                m
            });
        for (_, total) in totals {
            assert!((total - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn generate_log_injects_exact_rare_count() {
        let graph = default_graph();
        let log = generate_log(&graph, 1000, 10, 7).unwrap();
        assert_eq!(log.len(), 1000);
        let rare = log
            .traces
            .iter()
            .filter(|t| {
                t.activities().any(|a| a == "DevelopMethod")
                    && t.activities().any(|a| a == "FinalDecision")
            })
            .count();
        assert_eq!(rare, 10);
        let touching = log
            .traces
            .iter()
            .filter(|t| t.activities().any(|a| a == "DevelopMethod" || a == "RunExperiments" || a == "FinalDecision"))
            .count();
        assert_eq!(touching, 10, "rare-only activities appear only on rare traces");
    }

    #[test]
    fn generate_log_zero_rare_count_has_no_rare_activities() {
        let log = generate_log(&default_graph(), 200, 0, 11).unwrap();
        assert!(log
            .traces
            .iter()
            .all(|t| t.activities().all(|a| a != "DevelopMethod" && a != "FinalDecision")));
    }

    #[test]
    fn generate_log_is_deterministic_and_seed_sensitive() {
        let graph = default_graph();
        let a = generate_log(&graph, 50, 5, 42).unwrap();
        let b = generate_log(&graph, 50, 5, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_log(&graph, 50, 5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generate_log_respects_max_length() {
        let log = generate_log(&default_graph(), 1000, 10, 3).unwrap();
        assert!(log.max_trace_len() <= 16);
        assert!(log.traces.iter().all(|t| t.len() >= 1));
    }

    #[test]
    fn generate_log_rejects_rare_count_above_n_cases() {
        let err = generate_log(&default_graph(), 5, 6, 1).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn detect_format_handles_gz_suffix() {
        use std::path::PathBuf;
        assert_eq!(detect_format(&PathBuf::from("x.csv")).unwrap(), LogFormat::Csv);
        assert_eq!(detect_format(&PathBuf::from("x.xes.gz")).unwrap(), LogFormat::Xes);
        assert!(detect_format(&PathBuf::from("x.bin")).is_err());
    }

    #[test]
    fn gzipped_csv_reads_back() {
        use std::io::Write as _;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv.gz");
        let mut enc = flate2::write::GzEncoder::new(
            std::fs::File::create(&path).unwrap(),
            flate2::Compression::default(),
        );
        enc.write_all(sample_csv().as_bytes()).unwrap();
        enc.finish().unwrap();
        let parsed = read_log(&path, &CsvSchema::default()).unwrap();
        assert_eq!(parsed.log.len(), 2);
    }
}
