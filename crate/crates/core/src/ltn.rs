//! Real-valued logic over reconstructed traces: fuzzy connectives,
//! power-mean quantifier aggregators, compilation of Declare constraints
//! into differentiable expressions, the t+/t− partition, and LTN
//! fine-tuning with the combined reconstruction + satisfiability loss.
//!
//! Truth values live in `[0,1]`. Connectives are the product t-norm
//! family (`and = x·y`, `or = x+y−x·y`, `implies = 1−x+x·y`, `not = 1−x`),
//! chosen because they preserve booleans — the crisp-equivalence tests
//! depend on that. Quantifiers aggregate with power means: `A_pM` for ∃
//! (dominated by the maximum) and its error-form dual `A_pME` for ∀
//! (dominated by the minimum).

use crate::autoencoder::{
    encode_trace, forward_graph, mse_graph, stack_batch, Adam, EncodedTrace, Model,
    ProbTrace,
};
use crate::declare::{DeclareTemplate, KnowledgeBase, MinedConstraint};
use crate::eventlog::{EventLog, Trace, Vocabulary};
use crate::rng::{self, Stream};
use crate::tensorgrad::{Graph, NodeId, Tensor};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::Write;

/// Truth values are clamped into this interval before exponentiation in
/// smooth mode, keeping gradients finite at saturation.
pub const TRUTH_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

/// How quantifier nodes evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorMode {
    /// Power-mean aggregators with clamped inputs; differentiable.
    Smooth,
    /// Exact max/min without clamping; matches boolean semantics on
    /// one-hot inputs but is not differentiable.
    Crisp,
}

/// A fuzzy first-order expression over position predicates.
///
/// `Predicate { position, activity }` reads "activity occurs at position"
/// with 1-based positions. Quantifier nodes carry their aggregator
/// exponent.
#[derive(Debug, Clone, PartialEq)]
pub enum FuzzyExpr {
    Predicate { position: usize, activity: String },
    Not(Box<FuzzyExpr>),
    And(Box<FuzzyExpr>, Box<FuzzyExpr>),
    Or(Box<FuzzyExpr>, Box<FuzzyExpr>),
    Implies(Box<FuzzyExpr>, Box<FuzzyExpr>),
    Exists(Vec<FuzzyExpr>, f64),
    Forall(Vec<FuzzyExpr>, f64),
    Constant(f64),
}

impl fmt::Display for FuzzyExpr {
    /// Parenthesized prefix form, e.g. `(implies (P 1 A) (exists 2 (P 2 B)))`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FuzzyExpr::Predicate { position, activity } => write!(f, "(P {position} {activity})"),
            FuzzyExpr::Not(x) => write!(f, "(not {x})"),
            FuzzyExpr::And(x, y) => write!(f, "(and {x} {y})"),
            FuzzyExpr::Or(x, y) => write!(f, "(or {x} {y})"),
            FuzzyExpr::Implies(x, y) => write!(f, "(implies {x} {y})"),
            FuzzyExpr::Exists(xs, p) => {
                write!(f, "(exists {p}")?;
                for x in xs {
                    write!(f, " {x}")?;
                }
                write!(f, ")")
            }
            FuzzyExpr::Forall(xs, p) => {
                write!(f, "(forall {p}")?;
                for x in xs {
                    write!(f, " {x}")?;
                }
                write!(f, ")")
            }
            FuzzyExpr::Constant(v) => write!(f, "(const {v})"),
        }
    }
}

pub fn fuzzy_not(x: f64) -> f64 {
    1.0 - x
}

/// Product t-norm.
pub fn fuzzy_and(x: f64, y: f64) -> f64 {
    x * y
}

/// Probabilistic sum.
pub fn fuzzy_or(x: f64, y: f64) -> f64 {
    x + y - x * y
}

/// Reichenbach implication.
pub fn fuzzy_implies(x: f64, y: f64) -> f64 {
    1.0 - x + x * y
}

fn check_exponent(p: f64) -> Result<()> {
    if p < 1.0 {
        return Err(Error::Argument(format!(
            "aggregator exponent must be >= 1, got {p}"
        )));
    }
    Ok(())
}

/// Existential aggregator `A_pM(x) = (mean x_i^p)^(1/p)`; an empty
/// disjunction is false. Factored by the maximum for stability at large p.
pub fn agg_exists(values: &[f64], p: f64) -> Result<f64> {
    check_exponent(p)?;
    if values.is_empty() {
        return Ok(0.0);
    }
    let max = values.iter().copied().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return Ok(0.0);
    }
    let mean: f64 =
        values.iter().map(|x| (x / max).powf(p)).sum::<f64>() / values.len() as f64;
    Ok(max * mean.powf(1.0 / p))
}

/// Universal aggregator `A_pME(x) = 1 − (mean (1−x_i)^p)^(1/p)`; an empty
/// conjunction is true.
pub fn agg_forall(values: &[f64], p: f64) -> Result<f64> {
    check_exponent(p)?;
    if values.is_empty() {
        return Ok(1.0);
    }
    let errors: Vec<f64> = values.iter().map(|x| 1.0 - x).collect();
    Ok(1.0 - agg_exists(&errors, p)?)
}

/// The top-level satisfiability aggregator: another `A_pME`.
pub fn sat_agg(values: &[f64], p: f64) -> Result<f64> {
    agg_forall(values, p)
}

/// Truth value that `activity` occurs at 1-based `position` of the
/// reconstruction: its softmax probability there.
pub fn predicate_p(
    out: &ProbTrace,
    vocab: &Vocabulary,
    position: usize,
    activity: &str,
) -> Result<f64> {
    if position == 0 || position > out.max_len {
        return Err(Error::Argument(format!(
            "predicate position {position} outside 1..{}",
            out.max_len
        )));
    }
    let idx = vocab
        .activity_index(activity)
        .ok_or_else(|| Error::Vocabulary(format!("unknown activity '{activity}'")))?;
    Ok(out.activity_dist(position - 1)[idx])
}

fn pred(i: usize, a: &str) -> FuzzyExpr {
    FuzzyExpr::Predicate {
        position: i,
        activity: a.to_string(),
    }
}

/// Compiles a Declare constraint into a position-quantified fuzzy
/// expression over `1..=max_len`. Iterated conjunction becomes a `Forall`
/// node and iterated disjunction an `Exists` node; empty ∨ collapses to
/// `Constant(0)` and empty ∧ to `Constant(1)`.
pub fn compile(
    c: &MinedConstraint,
    max_len: usize,
    p_exists: f64,
    p_forall: f64,
) -> Result<FuzzyExpr> {
    if c.args.len() != c.template.arity() {
        return Err(Error::Argument(format!(
            "{} takes {} argument(s), got {}",
            c.template,
            c.template.arity(),
            c.args.len()
        )));
    }
    check_exponent(p_exists)?;
    check_exponent(p_forall)?;
    if max_len == 0 {
        return Err(Error::Argument("max_len must be positive".into()));
    }
    let a = c.args[0].as_str();
    let exists = |xs: Vec<FuzzyExpr>| {
        if xs.is_empty() {
            FuzzyExpr::Constant(0.0)
        } else {
            FuzzyExpr::Exists(xs, p_exists)
        }
    };
    let forall = |xs: Vec<FuzzyExpr>| {
        if xs.is_empty() {
            FuzzyExpr::Constant(1.0)
        } else {
            FuzzyExpr::Forall(xs, p_forall)
        }
    };
    let expr = match c.template {
        DeclareTemplate::Existence => exists((1..=max_len).map(|i| pred(i, a)).collect()),
        DeclareTemplate::RespondedExistence => {
            let b = c.args[1].as_str();
            FuzzyExpr::Implies(
                Box::new(exists((1..=max_len).map(|i| pred(i, a)).collect())),
                Box::new(exists((1..=max_len).map(|i| pred(i, b)).collect())),
            )
        }
        DeclareTemplate::Response => {
            let b = c.args[1].as_str();
            forall(
                (1..=max_len)
                    .map(|i| {
                        FuzzyExpr::Implies(
                            Box::new(pred(i, a)),
                            Box::new(exists((i + 1..=max_len).map(|j| pred(j, b)).collect())),
                        )
                    })
                    .collect(),
            )
        }
        DeclareTemplate::Precedence => {
            let b = c.args[1].as_str();
            forall(
                (1..=max_len)
                    .map(|i| {
                        FuzzyExpr::Implies(
                            Box::new(pred(i, b)),
                            Box::new(exists((1..i).map(|j| pred(j, a)).collect())),
                        )
                    })
                    .collect(),
            )
        }
        DeclareTemplate::Succession => {
            let response = MinedConstraint {
                template: DeclareTemplate::Response,
                ..c.clone()
            };
            let precedence = MinedConstraint {
                template: DeclareTemplate::Precedence,
                ..c.clone()
            };
            FuzzyExpr::And(
                Box::new(compile(&response, max_len, p_exists, p_forall)?),
                Box::new(compile(&precedence, max_len, p_exists, p_forall)?),
            )
        }
        DeclareTemplate::ChainResponse => {
            let b = c.args[1].as_str();
            let chain = forall(
                (1..max_len)
                    .map(|i| {
                        FuzzyExpr::Implies(Box::new(pred(i, a)), Box::new(pred(i + 1, b)))
                    })
                    .collect(),
            );
            FuzzyExpr::And(
                Box::new(chain),
                Box::new(FuzzyExpr::Not(Box::new(pred(max_len, a)))),
            )
        }
        DeclareTemplate::Choice => {
            let b = c.args[1].as_str();
            FuzzyExpr::Or(
                Box::new(exists((1..=max_len).map(|i| pred(i, a)).collect())),
                Box::new(exists((1..=max_len).map(|i| pred(i, b)).collect())),
            )
        }
        DeclareTemplate::ExclusiveChoice => {
            let b = c.args[1].as_str();
            let has_a = exists((1..=max_len).map(|i| pred(i, a)).collect());
            let has_b = exists((1..=max_len).map(|i| pred(i, b)).collect());
            FuzzyExpr::And(
                Box::new(FuzzyExpr::Or(
                    Box::new(has_a.clone()),
                    Box::new(has_b.clone()),
                )),
                Box::new(FuzzyExpr::Not(Box::new(FuzzyExpr::And(
                    Box::new(has_a),
                    Box::new(has_b),
                )))),
            )
        }
    };
    Ok(expr)
}

/// One truth-value carrier per evaluation backend. A single tree walk in
/// [`eval_expr`] serves both the numeric and the tensor-graph evaluation,
/// so the two cannot drift apart.
trait TruthAlgebra {
    type T: Clone;
    fn constant(&mut self, v: f64) -> Result<Self::T>;
    fn predicate(&mut self, position: usize, activity: &str) -> Result<Self::T>;
    fn not(&mut self, x: Self::T) -> Result<Self::T>;
    fn and(&mut self, x: Self::T, y: Self::T) -> Result<Self::T>;
    fn or(&mut self, x: Self::T, y: Self::T) -> Result<Self::T>;
    fn implies(&mut self, x: Self::T, y: Self::T) -> Result<Self::T>;
    fn exists(&mut self, xs: Vec<Self::T>, p: f64) -> Result<Self::T>;
    fn forall(&mut self, xs: Vec<Self::T>, p: f64) -> Result<Self::T>;
}

fn eval_expr<A: TruthAlgebra>(expr: &FuzzyExpr, alg: &mut A) -> Result<A::T> {
    match expr {
        FuzzyExpr::Constant(v) => alg.constant(*v),
        FuzzyExpr::Predicate { position, activity } => alg.predicate(*position, activity),
        FuzzyExpr::Not(x) => {
            let x = eval_expr(x, alg)?;
            alg.not(x)
        }
        FuzzyExpr::And(x, y) => {
            let x = eval_expr(x, alg)?;
            let y = eval_expr(y, alg)?;
            alg.and(x, y)
        }
        FuzzyExpr::Or(x, y) => {
            let x = eval_expr(x, alg)?;
            let y = eval_expr(y, alg)?;
            alg.or(x, y)
        }
        FuzzyExpr::Implies(x, y) => {
            let x = eval_expr(x, alg)?;
            let y = eval_expr(y, alg)?;
            alg.implies(x, y)
        }
        FuzzyExpr::Exists(xs, p) => {
            let vals = xs
                .iter()
                .map(|x| eval_expr(x, alg))
                .collect::<Result<Vec<_>>>()?;
            alg.exists(vals, *p)
        }
        FuzzyExpr::Forall(xs, p) => {
            let vals = xs
                .iter()
                .map(|x| eval_expr(x, alg))
                .collect::<Result<Vec<_>>>()?;
            alg.forall(vals, *p)
        }
    }
}

struct NumericAlgebra<'a> {
    out: &'a ProbTrace,
    vocab: &'a Vocabulary,
    mode: AggregatorMode,
}

impl TruthAlgebra for NumericAlgebra<'_> {
    type T = f64;

    fn constant(&mut self, v: f64) -> Result<f64> {
        Ok(v)
    }

    fn predicate(&mut self, position: usize, activity: &str) -> Result<f64> {
        predicate_p(self.out, self.vocab, position, activity)
    }

    fn not(&mut self, x: f64) -> Result<f64> {
        Ok(fuzzy_not(x))
    }

    fn and(&mut self, x: f64, y: f64) -> Result<f64> {
        Ok(fuzzy_and(x, y))
    }

    fn or(&mut self, x: f64, y: f64) -> Result<f64> {
        Ok(fuzzy_or(x, y))
    }

    fn implies(&mut self, x: f64, y: f64) -> Result<f64> {
        Ok(fuzzy_implies(x, y))
    }

    fn exists(&mut self, xs: Vec<f64>, p: f64) -> Result<f64> {
        match self.mode {
            AggregatorMode::Crisp => Ok(xs.iter().copied().fold(0.0_f64, f64::max)),
            AggregatorMode::Smooth => {
                let clamped: Vec<f64> =
                    xs.iter().map(|x| x.clamp(TRUTH_CLAMP.0, TRUTH_CLAMP.1)).collect();
                agg_exists(&clamped, p)
            }
        }
    }

    fn forall(&mut self, xs: Vec<f64>, p: f64) -> Result<f64> {
        match self.mode {
            AggregatorMode::Crisp => Ok(xs.iter().copied().fold(1.0_f64, f64::min)),
            AggregatorMode::Smooth => {
                let clamped: Vec<f64> =
                    xs.iter().map(|x| x.clamp(TRUTH_CLAMP.0, TRUTH_CLAMP.1)).collect();
                agg_forall(&clamped, p)
            }
        }
    }
}

/// Evaluates an expression against one reconstruction. Crisp mode uses
/// exact max/min (boolean-faithful on one-hot inputs); smooth mode is the
/// differentiable power-mean semantics with clamping.
pub fn satisfiability(
    expr: &FuzzyExpr,
    out: &ProbTrace,
    vocab: &Vocabulary,
    mode: AggregatorMode,
) -> Result<f64> {
    let mut alg = NumericAlgebra { out, vocab, mode };
    eval_expr(expr, &mut alg)
}

/// Graph-building algebra: truth values are scalar nodes computed from one
/// row of the batched forward output. Smooth mode only.
struct GraphAlgebra<'a, 'g> {
    g: &'g mut Graph,
    out: NodeId,
    row: usize,
    width: usize,
    max_len: usize,
    vocab: &'a Vocabulary,
    one: NodeId,
    /// (position, activity index) → already-sliced predicate node
    cache: HashMap<(usize, usize), NodeId>,
}

impl<'a, 'g> GraphAlgebra<'a, 'g> {
    fn new(
        g: &'g mut Graph,
        out: NodeId,
        row: usize,
        width: usize,
        max_len: usize,
        vocab: &'a Vocabulary,
    ) -> Self {
        let one = g.scalar(1.0);
        GraphAlgebra {
            g,
            out,
            row,
            width,
            max_len,
            vocab,
            one,
            cache: HashMap::new(),
        }
    }
}

impl TruthAlgebra for GraphAlgebra<'_, '_> {
    type T = NodeId;

    fn constant(&mut self, v: f64) -> Result<NodeId> {
        Ok(self.g.scalar(v))
    }

    fn predicate(&mut self, position: usize, activity: &str) -> Result<NodeId> {
        if position == 0 || position > self.max_len {
            return Err(Error::Argument(format!(
                "predicate position {position} outside 1..{}",
                self.max_len
            )));
        }
        let idx = self
            .vocab
            .activity_index(activity)
            .ok_or_else(|| Error::Vocabulary(format!("unknown activity '{activity}'")))?;
        if let Some(&node) = self.cache.get(&(position, idx)) {
            return Ok(node);
        }
        let col = (position - 1) * self.width + idx;
        let column = self.g.slice(self.out, 1, col, col + 1)?;
        let cell = self.g.slice(column, 0, self.row, self.row + 1)?;
        let scalar = self.g.sum(cell, None)?;
        self.cache.insert((position, idx), scalar);
        Ok(scalar)
    }

    fn not(&mut self, x: NodeId) -> Result<NodeId> {
        self.g.sub(self.one, x)
    }

    fn and(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.g.mul(x, y)
    }

    fn or(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let sum = self.g.add(x, y)?;
        let prod = self.g.mul(x, y)?;
        self.g.sub(sum, prod)
    }

    fn implies(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let not_x = self.g.sub(self.one, x)?;
        let xy = self.g.mul(x, y)?;
        self.g.add(not_x, xy)
    }

    fn exists(&mut self, xs: Vec<NodeId>, p: f64) -> Result<NodeId> {
        check_exponent(p)?;
        if xs.is_empty() {
            return Ok(self.g.scalar(0.0));
        }
        let stacked = self.g.concat(&xs, 0)?;
        let clamped = self.g.clamp(stacked, TRUTH_CLAMP.0, TRUTH_CLAMP.1)?;
        let powered = self.g.power(clamped, p)?;
        let mean = self.g.mean(powered, None)?;
        self.g.power(mean, 1.0 / p)
    }

    fn forall(&mut self, xs: Vec<NodeId>, p: f64) -> Result<NodeId> {
        check_exponent(p)?;
        if xs.is_empty() {
            return Ok(self.g.scalar(1.0));
        }
        let stacked = self.g.concat(&xs, 0)?;
        let clamped = self.g.clamp(stacked, TRUTH_CLAMP.0, TRUTH_CLAMP.1)?;
        let ones = self.g.constant(Tensor::fill(&[xs.len()], 1.0));
        let errors = self.g.sub(ones, clamped)?;
        let powered = self.g.power(errors, p)?;
        let mean = self.g.mean(powered, None)?;
        let root = self.g.power(mean, 1.0 / p)?;
        self.g.sub(self.one, root)
    }
}

/// Builds the satisfiability of `expr` for one row of a batched forward
/// output, as a differentiable scalar node (smooth semantics).
pub fn satisfiability_graph(
    g: &mut Graph,
    expr: &FuzzyExpr,
    out: NodeId,
    row: usize,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<NodeId> {
    let width = vocab.n_activities() + vocab.n_resources();
    let mut alg = GraphAlgebra::new(g, out, row, width, max_len, vocab);
    eval_expr(expr, &mut alg)
}

/// The t+/t− split of a log under one constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Activated traces where the constraint holds.
    pub t_plus: Vec<Trace>,
    /// Activated traces where it is violated.
    pub t_minus: Vec<Trace>,
    /// Vacuous traces — no activation, hence no signal.
    pub excluded: Vec<Trace>,
}

/// Splits a log by crisp evaluation of `c`: activated∧holds → t+,
/// activated∧¬holds → t−, not activated → excluded. An empty t+ is an
/// error since fine-tuning has nothing to pull toward.
pub fn partition(log: &EventLog, c: &MinedConstraint) -> Result<Partition> {
    let mut part = Partition {
        t_plus: Vec::new(),
        t_minus: Vec::new(),
        excluded: Vec::new(),
    };
    for trace in &log.traces {
        let out = c.evaluate(trace);
        if out.activated && out.holds {
            part.t_plus.push(trace.clone());
        } else if out.activated {
            part.t_minus.push(trace.clone());
        } else {
            part.excluded.push(trace.clone());
        }
    }
    if part.t_plus.is_empty() {
        return Err(Error::Partition(format!(
            "no trace satisfies {c} non-vacuously; nothing to fine-tune toward"
        )));
    }
    Ok(part)
}

/// Manufactures crisp violations from satisfying traces by deleting the
/// constraint's consequent events (antecedent events for Precedence).
/// Every output is verified to violate `c`.
pub fn synthesize_violations(
    t_plus: &[Trace],
    c: &MinedConstraint,
    count: usize,
    rng: &mut Stream,
) -> Result<Vec<Trace>> {
    let remove_activity = match c.template {
        DeclareTemplate::Response
        | DeclareTemplate::ChainResponse
        | DeclareTemplate::RespondedExistence
        | DeclareTemplate::Succession => c.args[1].as_str(),
        DeclareTemplate::Precedence => c.args[0].as_str(),
        DeclareTemplate::Existence | DeclareTemplate::Choice | DeclareTemplate::ExclusiveChoice => {
            return Err(Error::Unsupported(format!(
                "{} has no removable consequent to violate",
                c.template
            )))
        }
    };
    if t_plus.is_empty() && count > 0 {
        return Err(Error::Argument("cannot synthesize violations from empty t_plus".into()));
    }
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let source = t_plus
            .choose(rng)
            .expect("t_plus checked non-empty above");
        let mut mutated = source.clone();
        mutated.case_id = format!("{}_viol_{k}", source.case_id);
        mutated.events.retain(|e| e.activity != remove_activity);
        let verdict = c.evaluate(&mutated);
        if verdict.holds || !verdict.activated {
            return Err(Error::Domain(format!(
                "synthesized trace from '{}' does not violate {c}",
                source.case_id
            )));
        }
        out.push(mutated);
    }
    Ok(out)
}

/// Fine-tuning hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lambda_rec: f64,
    pub lambda_sat: f64,
    pub p_exists: f64,
    pub p_forall: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: AggregatorMode,
    /// Fraction of the pretraining log replayed per epoch for the
    /// reconstruction term.
    pub replay_fraction: f64,
    pub batch: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lambda_rec: 1.0,
            lambda_sat: 0.5,
            p_exists: 2.0,
            p_forall: 2.0,
            epochs: 30,
            lr: 1e-3,
            seed: 17,
            mode: AggregatorMode::Smooth,
            replay_fraction: 0.25,
            batch: 32,
        }
    }
}

/// Per-epoch fine-tuning record. `loss = rec_term + sat_term` with
/// `rec_term = λ_rec·L_rec` and `sat_term = λ_sat·(1−SatAgg)`, averaged
/// over the epoch's batches; `t_plus_sat` is the mean smooth
/// satisfiability over t+ after the epoch, and `replay_rec` the mean
/// reconstruction error over the epoch's replay sample after the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub rec_term: f64,
    pub sat_term: f64,
    pub t_plus_sat: f64,
    pub replay_rec: f64,
}

/// A fine-tuned model plus its per-epoch history.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub history: Vec<FinetuneEpoch>,
}

/// LTN fine-tuning: descends
/// `L = λ_rec·L_rec + λ_sat·(1 − SatAgg)` where `L_rec` is the mean
/// reconstruction error over a replay batch plus all of t+, and `SatAgg`
/// conjoins, per knowledge-base constraint, `A_pME` of Φ over t+ and
/// `A_pME` of ¬Φ over t− (omitted when t− is empty).
///
/// Every batch contains all of t+ (and t−): the partition is tiny next to
/// the replay log and is the whole point of the exercise. Deterministic
/// given the config seed.
pub fn finetune(
    model: &Model,
    pretrain_log: &EventLog,
    part: &Partition,
    kb: &KnowledgeBase,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if part.t_plus.is_empty() {
        return Err(Error::Argument("finetune requires non-empty t_plus".into()));
    }
    if kb.constraints.is_empty() {
        return Err(Error::Argument("finetune requires a non-empty knowledge base".into()));
    }
    if config.lambda_rec + config.lambda_sat <= 0.0 {
        return Err(Error::Argument(
            "lambda_rec + lambda_sat must be positive".into(),
        ));
    }
    if config.mode == AggregatorMode::Crisp {
        return Err(Error::Unsupported(
            "crisp aggregators (max/min) are not differentiable; fine-tuning requires smooth mode"
                .into(),
        ));
    }
    check_exponent(config.p_exists)?;
    check_exponent(config.p_forall)?;
    if !(0.0..=1.0).contains(&config.replay_fraction) {
        return Err(Error::Argument(format!(
            "replay_fraction must be in [0,1], got {}",
            config.replay_fraction
        )));
    }
    if config.batch == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }

    let max_len = model.arch.max_len;
    let vocab = &model.vocab;
    let exprs: Vec<FuzzyExpr> = kb
        .constraints
        .iter()
        .map(|c| compile(c, max_len, config.p_exists, config.p_forall))
        .collect::<Result<_>>()?;

    let enc_plus: Vec<EncodedTrace> = part
        .t_plus
        .iter()
        .map(|t| encode_trace(t, vocab, max_len))
        .collect::<Result<_>>()?;
    let enc_minus: Vec<EncodedTrace> = part
        .t_minus
        .iter()
        .map(|t| encode_trace(t, vocab, max_len))
        .collect::<Result<_>>()?;
    let enc_replay_pool: Vec<EncodedTrace> = pretrain_log
        .traces
        .iter()
        .map(|t| encode_trace(t, vocab, max_len))
        .collect::<Result<_>>()?;

    let mut tuned = model.clone();
    let mut params = tuned.params_flat();
    let mut adam = Adam::new(&params);
    let mut replay_rng = rng::substream(config.seed, "finetune.replay");
    let replay_per_epoch =
        (enc_replay_pool.len() as f64 * config.replay_fraction).floor() as usize;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        // seeded replay sample, then fixed-size reconstruction batches
        let mut pool: Vec<usize> = (0..enc_replay_pool.len()).collect();
        pool.shuffle(&mut replay_rng);
        let replay: Vec<usize> = pool.into_iter().take(replay_per_epoch).collect();
        let batches: Vec<&[usize]> = if replay.is_empty() {
            vec![&[]]
        } else {
            replay.chunks(config.batch).collect()
        };

        let mut sums = (0.0, 0.0, 0.0); // loss, rec_term, sat_term
        for chunk in &batches {
            // batch rows: replay chunk, then all of t+, then all of t−;
            // only the first two groups feed the reconstruction term
            let mut rows: Vec<&EncodedTrace> =
                chunk.iter().map(|&i| &enc_replay_pool[i]).collect();
            let rec_rows = rows.len() + enc_plus.len();
            rows.extend(enc_plus.iter());
            let plus_start = rec_rows - enc_plus.len();
            rows.extend(enc_minus.iter());

            let mut g = Graph::new();
            let param_ids: Vec<NodeId> =
                params.iter().map(|t| g.parameter(t.clone())).collect();
            let input = g.constant(stack_batch(&rows)?);
            let out = forward_graph(&mut g, &tuned.arch, &param_ids, input)?;

            let rec_out = g.slice(out, 0, 0, rec_rows)?;
            let rec_target = g.constant(stack_batch(&rows[..rec_rows])?);
            let rec = mse_graph(&mut g, rec_out, rec_target)?;

            let mut aggregands: Vec<NodeId> = Vec::new();
            for expr in &exprs {
                let plus_vals: Vec<NodeId> = (0..enc_plus.len())
                    .map(|k| {
                        satisfiability_graph(&mut g, expr, out, plus_start + k, vocab, max_len)
                    })
                    .collect::<Result<_>>()?;
                aggregands.push(forall_nodes(&mut g, &plus_vals, config.p_forall)?);
                if !enc_minus.is_empty() {
                    let one = g.scalar(1.0);
                    let minus_vals: Vec<NodeId> = (0..enc_minus.len())
                        .map(|k| {
                            let phi = satisfiability_graph(
                                &mut g,
                                expr,
                                out,
                                rec_rows + k,
                                vocab,
                                max_len,
                            )?;
                            g.sub(one, phi)
                        })
                        .collect::<Result<_>>()?;
                    aggregands.push(forall_nodes(&mut g, &minus_vals, config.p_forall)?);
                }
            }
            let sat = forall_nodes(&mut g, &aggregands, config.p_forall)?;

            let lam_rec = g.scalar(config.lambda_rec);
            let rec_term = g.mul(rec, lam_rec)?;
            let one = g.scalar(1.0);
            let dissat = g.sub(one, sat)?;
            let lam_sat = g.scalar(config.lambda_sat);
            let sat_term = g.mul(dissat, lam_sat)?;
            let loss = g.add(rec_term, sat_term)?;

            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: loss_value,
                });
            }
            sums.0 += loss_value;
            sums.1 += g.value(rec_term).item();
            sums.2 += g.value(sat_term).item();

            let grads = g.backward(loss)?;
            let grad_refs: Vec<&Tensor> = param_ids
                .iter()
                .map(|id| grads.get(*id).expect("registered parameter"))
                .collect();
            adam.step(&mut params, &grad_refs, config.lr);
        }

        tuned.set_params_flat(params.clone());
        let nb = batches.len() as f64;
        history.push(FinetuneEpoch {
            epoch,
            loss: sums.0 / nb,
            rec_term: sums.1 / nb,
            sat_term: sums.2 / nb,
            t_plus_sat: mean_sat(&tuned, &enc_plus, &exprs, config.p_forall)?,
            replay_rec: mean_rec(&tuned, &enc_replay_pool, &replay)?,
        });
    }

    tuned.set_params_flat(params);
    tuned.meta.epochs_trained += config.epochs;
    tuned
        .meta
        .loss_history
        .extend(history.iter().map(|h| h.loss));
    Ok(FinetuneOutcome {
        model: tuned,
        history,
    })
}

/// `A_pME` over already-built scalar truth nodes.
fn forall_nodes(g: &mut Graph, xs: &[NodeId], p: f64) -> Result<NodeId> {
    if xs.is_empty() {
        return Ok(g.scalar(1.0));
    }
    let stacked = g.concat(xs, 0)?;
    let clamped = g.clamp(stacked, TRUTH_CLAMP.0, TRUTH_CLAMP.1)?;
    let ones = g.constant(Tensor::fill(&[xs.len()], 1.0));
    let errors = g.sub(ones, clamped)?;
    let powered = g.power(errors, p)?;
    let mean = g.mean(powered, None)?;
    let root = g.power(mean, 1.0 / p)?;
    let one = g.scalar(1.0);
    g.sub(one, root)
}

/// Mean smooth satisfiability over encodings; constraints are conjoined
/// per trace with [`sat_agg`].
fn mean_sat(model: &Model, encs: &[EncodedTrace], exprs: &[FuzzyExpr], p: f64) -> Result<f64> {
    if encs.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for enc in encs {
        let out = model.forward(enc)?;
        let per_constraint: Vec<f64> = exprs
            .iter()
            .map(|e| satisfiability(e, &out, &model.vocab, AggregatorMode::Smooth))
            .collect::<Result<_>>()?;
        total += sat_agg(&per_constraint, p)?;
    }
    Ok(total / encs.len() as f64)
}

fn mean_rec(model: &Model, pool: &[EncodedTrace], sample: &[usize]) -> Result<f64> {
    if sample.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &i in sample {
        total += model.score(&pool[i])?;
    }
    Ok(total / sample.len() as f64)
}

/// Writes fine-tuning history as CSV with the pinned column set.
pub fn write_finetune_history<W: Write>(history: &[FinetuneEpoch], mut w: W) -> Result<()> {
    writeln!(w, "epoch,loss,rec_term,sat_term,t_plus_sat")?;
    for h in history {
        writeln!(
            w,
            "{},{},{},{},{}",
            h.epoch, h.loss, h.rec_term, h.sat_term, h.t_plus_sat
        )?;
    }
    Ok(())
}
