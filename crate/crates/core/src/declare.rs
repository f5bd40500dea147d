//! Declare constraint templates with crisp trace semantics, a
//! support/confidence miner, and knowledge-base selection.
//!
//! Eight standard control-flow templates are supported. Semantics follow
//! the usual first-order reading over event positions; the conventions
//! that matter for edge cases are spelled out on [`evaluate_crisp`].

use crate::eventlog::{EventLog, Trace, Vocabulary};
use crate::exec;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

/// The supported Declare templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DeclareTemplate {
    Existence,
    RespondedExistence,
    Response,
    Precedence,
    Succession,
    ChainResponse,
    Choice,
    ExclusiveChoice,
}

/// All templates, in declaration order.
pub const ALL_TEMPLATES: [DeclareTemplate; 8] = [
    DeclareTemplate::Existence,
    DeclareTemplate::RespondedExistence,
    DeclareTemplate::Response,
    DeclareTemplate::Precedence,
    DeclareTemplate::Succession,
    DeclareTemplate::ChainResponse,
    DeclareTemplate::Choice,
    DeclareTemplate::ExclusiveChoice,
];

impl DeclareTemplate {
    /// Number of activity arguments.
    pub fn arity(&self) -> usize {
        match self {
            DeclareTemplate::Existence => 1,
            _ => 2,
        }
    }

    /// Whether the template has an activation notion (and therefore a
    /// confidence value when activations exist).
    pub fn has_activation(&self) -> bool {
        !matches!(
            self,
            DeclareTemplate::Existence | DeclareTemplate::Choice | DeclareTemplate::ExclusiveChoice
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            DeclareTemplate::Existence => "Existence",
            DeclareTemplate::RespondedExistence => "RespondedExistence",
            DeclareTemplate::Response => "Response",
            DeclareTemplate::Precedence => "Precedence",
            DeclareTemplate::Succession => "Succession",
            DeclareTemplate::ChainResponse => "ChainResponse",
            DeclareTemplate::Choice => "Choice",
            DeclareTemplate::ExclusiveChoice => "ExclusiveChoice",
        }
    }
}

impl fmt::Display for DeclareTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DeclareTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_TEMPLATES
            .iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::Argument(format!("unknown Declare template '{s}'")))
    }
}

/// A template instantiated with activities, scored over a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedConstraint {
    pub template: DeclareTemplate,
    pub args: Vec<String>,
    pub support: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confidence: Option<f64>,
}

impl MinedConstraint {
    pub fn evaluate(&self, trace: &Trace) -> CrispOutcome {
        evaluate_crisp(self.template, &self.args, trace)
    }
}

impl fmt::Display for MinedConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.template, self.args.join(","))
    }
}

/// Crisp verdict for one constraint on one trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrispOutcome {
    pub holds: bool,
    pub activated: bool,
}

/// Evaluates a template instance on a trace under boolean semantics.
///
/// Conventions: universally quantified templates hold vacuously when the
/// antecedent never occurs; `ChainResponse(A,B)` additionally requires
/// that the last event is not `A` (an `A` there has no successor, so the
/// inner disjunction is empty and false); activation means the antecedent
/// occurs — `A` for Response/ChainResponse/RespondedExistence, `B` for
/// Precedence, either for Succession, never for Existence/Choice/
/// ExclusiveChoice.
pub fn evaluate_crisp(template: DeclareTemplate, args: &[String], trace: &Trace) -> CrispOutcome {
    let acts: Vec<&str> = trace.activities().collect();
    let occurs = |x: &str| acts.iter().any(|a| *a == x);
    let a = args[0].as_str();
    match template {
        DeclareTemplate::Existence => CrispOutcome {
            holds: occurs(a),
            activated: false,
        },
        DeclareTemplate::RespondedExistence => {
            let b = args[1].as_str();
            CrispOutcome {
                holds: !occurs(a) || occurs(b),
                activated: occurs(a),
            }
        }
        DeclareTemplate::Response => {
            let b = args[1].as_str();
            let holds = (0..acts.len())
                .filter(|&i| acts[i] == a)
                .all(|i| acts[i + 1..].iter().any(|x| *x == b));
            CrispOutcome {
                holds,
                activated: occurs(a),
            }
        }
        DeclareTemplate::Precedence => {
            let b = args[1].as_str();
            let holds = (0..acts.len())
                .filter(|&i| acts[i] == b)
                .all(|i| acts[..i].iter().any(|x| *x == a));
            CrispOutcome {
                holds,
                activated: occurs(b),
            }
        }
        DeclareTemplate::Succession => {
            let resp = evaluate_crisp(DeclareTemplate::Response, args, trace);
            let prec = evaluate_crisp(DeclareTemplate::Precedence, args, trace);
            CrispOutcome {
                holds: resp.holds && prec.holds,
                activated: resp.activated || prec.activated,
            }
        }
        DeclareTemplate::ChainResponse => {
            let b = args[1].as_str();
            let chain_ok = (0..acts.len().saturating_sub(1))
                .filter(|&i| acts[i] == a)
                .all(|i| acts[i + 1] == b);
            let last_ok = acts.last().map(|x| *x != a).unwrap_or(true);
            CrispOutcome {
                holds: chain_ok && last_ok,
                activated: occurs(a),
            }
        }
        DeclareTemplate::Choice => {
            let b = args[1].as_str();
            CrispOutcome {
                holds: occurs(a) || occurs(b),
                activated: false,
            }
        }
        DeclareTemplate::ExclusiveChoice => {
            let b = args[1].as_str();
            CrispOutcome {
                holds: occurs(a) != occurs(b),
                activated: false,
            }
        }
    }
}

/// Mines every instantiation of the given templates over the vocabulary's
/// activities (excluding `PAD`; binary templates use ordered pairs of
/// distinct activities).
///
/// For templates with an activation notion, support is the fraction of
/// traces that activate the constraint and confidence is the fraction of
/// activated traces where it holds (absent when nothing activates it).
/// For Existence/Choice/ExclusiveChoice, support is the fraction of traces
/// where the constraint holds and confidence is always absent. Output is
/// sorted by template name, then arguments.
pub fn mine(
    log: &EventLog,
    templates: &[DeclareTemplate],
    vocab: &Vocabulary,
) -> Result<Vec<MinedConstraint>> {
    if log.is_empty() {
        return Err(Error::EmptyLog("cannot mine constraints from empty log".into()));
    }
    let activities = vocab.real_activities();
    let mut cells: Vec<(DeclareTemplate, Vec<String>)> = Vec::new();
    for &template in templates {
        if template.arity() == 1 {
            for a in activities {
                cells.push((template, vec![a.clone()]));
            }
        } else {
            for a in activities {
                for b in activities {
                    if a != b {
                        cells.push((template, vec![a.clone(), b.clone()]));
                    }
                }
            }
        }
    }

    let n = log.len() as f64;
    let mut mined = exec::map_ordered(&cells, |(template, args)| {
        let mut holds = 0usize;
        let mut activated = 0usize;
        let mut both = 0usize;
        for trace in &log.traces {
            let out = evaluate_crisp(*template, args, trace);
            holds += out.holds as usize;
            activated += out.activated as usize;
            both += (out.holds && out.activated) as usize;
        }
        let (support, confidence) = if template.has_activation() {
            let confidence = if activated > 0 {
                Some(both as f64 / activated as f64)
            } else {
                None
            };
            (activated as f64 / n, confidence)
        } else {
            (holds as f64 / n, None)
        };
        MinedConstraint {
            template: *template,
            args: args.clone(),
            support,
            confidence,
        }
    });
    mined.sort_by(|x, y| {
        x.template
            .name()
            .cmp(y.template.name())
            .then_with(|| x.args.cmp(&y.args))
    });
    Ok(mined)
}

/// One `Template(A,B)` pattern from a whitelist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhitelistEntry {
    pub template: DeclareTemplate,
    pub args: Vec<String>,
}

impl WhitelistEntry {
    pub fn matches(&self, c: &MinedConstraint) -> bool {
        self.template == c.template && self.args == c.args
    }
}

/// Parses comma-separated `Template(A,B)` patterns; commas inside the
/// parentheses separate arguments, not entries.
pub fn parse_whitelist(s: &str) -> Result<Vec<WhitelistEntry>> {
    let mut entries = Vec::new();
    for part in split_outside_parens(s) {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let open = part.find('(').ok_or_else(|| {
            Error::Argument(format!("whitelist entry '{part}' is not Template(args)"))
        })?;
        if !part.ends_with(')') {
            return Err(Error::Argument(format!(
                "whitelist entry '{part}' is missing closing parenthesis"
            )));
        }
        let template: DeclareTemplate = part[..open].trim().parse()?;
        let args: Vec<String> = part[open + 1..part.len() - 1]
            .split(',')
            .map(|a| a.trim().to_string())
            .filter(|a| !a.is_empty())
            .collect();
        if args.len() != template.arity() {
            return Err(Error::Argument(format!(
                "whitelist entry '{part}': {template} takes {} argument(s), got {}",
                template.arity(),
                args.len()
            )));
        }
        entries.push(WhitelistEntry { template, args });
    }
    if entries.is_empty() {
        return Err(Error::Argument("whitelist is empty".into()));
    }
    Ok(entries)
}

fn split_outside_parens(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

/// The selected constraints plus a human-readable provenance note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub constraints: Vec<MinedConstraint>,
    pub provenance: String,
}

/// Selects the knowledge base from mined constraints.
///
/// A constraint passes the thresholds when `support <= max_support` and
/// its confidence is present and `>= min_confidence`; confidence-free
/// constraints (Existence/Choice/ExclusiveChoice, or nothing activated)
/// can only enter via the whitelist, and then only the support threshold
/// applies. When a whitelist is given the result is narrowed to matching
/// entries. An empty selection is an error that names the nearest misses.
pub fn filter_constraints(
    mined: &[MinedConstraint],
    max_support: f64,
    min_confidence: f64,
    whitelist: Option<&[WhitelistEntry]>,
) -> Result<KnowledgeBase> {
    for (name, v) in [("max_support", max_support), ("min_confidence", min_confidence)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Argument(format!("{name} must be in [0,1], got {v}")));
        }
    }
    let in_whitelist =
        |c: &MinedConstraint| whitelist.is_none_or(|w| w.iter().any(|e| e.matches(c)));
    let selected: Vec<MinedConstraint> = mined
        .iter()
        .filter(|c| {
            let support_ok = c.support <= max_support;
            let eligible = match c.confidence {
                Some(conf) => support_ok && conf >= min_confidence,
                // confidence-free: only the whitelist can admit it
                None => support_ok && whitelist.is_some(),
            };
            eligible && in_whitelist(c)
        })
        .cloned()
        .collect();

    if selected.is_empty() {
        let mut misses: Vec<(f64, String)> = mined
            .iter()
            .map(|c| {
                let gap = (c.support - max_support).max(0.0)
                    + (min_confidence - c.confidence.unwrap_or(0.0)).max(0.0);
                (gap, format!("{c} (support {:.4}, confidence {:?})", c.support, c.confidence))
            })
            .collect();
        misses.sort_by(|a, b| a.0.total_cmp(&b.0));
        let nearest: Vec<String> = misses.into_iter().take(3).map(|(_, s)| s).collect();
        return Err(Error::Selection(format!(
            "no constraint passed selection; nearest misses: {}",
            nearest.join("; ")
        )));
    }

    let provenance = format!(
        "max_support={max_support}, min_confidence={min_confidence}, whitelist={}",
        match whitelist {
            Some(w) => w
                .iter()
                .map(|e| format!("{}({})", e.template, e.args.join(",")))
                .collect::<Vec<_>>()
                .join(" "),
            None => "none".into(),
        }
    );
    Ok(KnowledgeBase {
        constraints: selected,
        provenance,
    })
}

#[derive(Serialize, Deserialize)]
struct KbRecord {
    template: DeclareTemplate,
    args: Vec<String>,
    support: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    provenance: Option<String>,
}

/// Writes mined constraints as JSON lines.
pub fn write_constraints_jsonl<W: Write>(constraints: &[MinedConstraint], mut w: W) -> Result<()> {
    for c in constraints {
        serde_json::to_writer(&mut w, c).map_err(|e| Error::Parse {
            line: None,
            msg: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSON-lines constraints (ignoring any provenance fields).
pub fn read_constraints_jsonl<R: BufRead>(reader: R) -> Result<Vec<MinedConstraint>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: KbRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: Some(i + 1),
            msg: e.to_string(),
        })?;
        out.push(MinedConstraint {
            template: rec.template,
            args: rec.args,
            support: rec.support,
            confidence: rec.confidence,
        });
    }
    Ok(out)
}

impl KnowledgeBase {
    /// Serializes as JSON lines; every record carries the provenance note.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for c in &self.constraints {
            let rec = KbRecord {
                template: c.template,
                args: c.args.clone(),
                support: c.support,
                confidence: c.confidence,
                provenance: Some(self.provenance.clone()),
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Parse {
                line: None,
                msg: e.to_string(),
            })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut constraints = Vec::new();
        let mut provenance = String::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: KbRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: Some(i + 1),
                msg: e.to_string(),
            })?;
            if let Some(p) = rec.provenance {
                provenance = p;
            }
            constraints.push(MinedConstraint {
                template: rec.template,
                args: rec.args,
                support: rec.support,
                confidence: rec.confidence,
            });
        }
        if constraints.is_empty() {
            return Err(Error::EmptyLog("knowledge base file has no constraints".into()));
        }
        Ok(KnowledgeBase {
            constraints,
            provenance,
        })
    }
}
