//! Deterministic scripted agents.
//!
//! Candidates are scored by label relevance on the training rows: the
//! largest absolute Pearson correlation between the candidate column and a
//! one-vs-rest class indicator. Each strategy has a primary and a secondary
//! operation family; after a round whose delta was negative the agent
//! switches to the secondary family.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Action, Agent, AgentContext, AgentError, AgentProposal, AgentStrategy};
use crate::expr::FeatureExpr;
use crate::ops::Operation;

const UNARY_PRIMARY: [Operation; 5] = [
    Operation::Square,
    Operation::Sqrt,
    Operation::Log,
    Operation::Cube,
    Operation::Reciprocal,
];
const UNARY_SECONDARY: [Operation; 5] = [
    Operation::Sigmoid,
    Operation::Exp,
    Operation::Sin,
    Operation::Cos,
    Operation::Tan,
];
const BINARY_PRIMARY: [Operation; 2] = [Operation::Multiply, Operation::Divide];
const BINARY_SECONDARY: [Operation; 2] = [Operation::Plus, Operation::Subtract];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedAgent {
    pub strategy: AgentStrategy,
    pub seed: u64,
}

impl ScriptedAgent {
    pub fn new(strategy: AgentStrategy, seed: u64) -> Self {
        ScriptedAgent { strategy, seed }
    }
}

impl Agent for ScriptedAgent {
    fn strategy(&self) -> String {
        self.strategy.tag().to_owned()
    }

    fn propose(&self, ctx: &AgentContext) -> Result<AgentProposal, AgentError> {
        Ok(scripted_propose(self.strategy, self.seed, ctx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Unary,
    Binary,
}

#[derive(Debug, Clone)]
struct Candidate {
    op: Operation,
    operands: Vec<FeatureExpr>,
    expr: FeatureExpr,
    score: f64,
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Largest |correlation| with any one-vs-rest class indicator.
fn relevance(values: &[f64], indicators: &[Vec<f64>]) -> f64 {
    let r = indicators
        .iter()
        .map(|ind| pearson(values, ind).abs())
        .fold(0.0, f64::max);
    if r.is_finite() {
        r
    } else {
        0.0
    }
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

struct Scorer<'a> {
    ctx: &'a AgentContext,
    indicators: Vec<Vec<f64>>,
    taken: HashSet<String>,
}

impl Scorer<'_> {
    /// Score of a new expression, or `None` when it is unusable.
    fn score(&self, e: &FeatureExpr) -> Option<f64> {
        if e.depth() > self.ctx.max_depth
            || self.ctx.subset.contains(e.name())
            || self.taken.contains(e.name())
        {
            return None;
        }
        let Some(view) = &self.ctx.data else {
            return Some(0.0);
        };
        let v = view.candidate_values(e)?;
        if variance(&v) <= 0.0 {
            return None;
        }
        Some(relevance(&v, &self.indicators))
    }

    fn candidate(&self, op: Operation, operands: &[FeatureExpr]) -> Option<Candidate> {
        let expr = FeatureExpr::apply(op, operands).ok()?;
        let score = self.score(&expr)?;
        Some(Candidate {
            op,
            operands: operands.to_vec(),
            expr,
            score,
        })
    }
}

fn by_score_desc(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score)
}

/// The scripted policy; a pure function of `(strategy, seed, ctx)`.
///
/// * nonlinear-unary: best unary op (by relevance) on each of the `k_max`
///   highest-variance operands.
/// * interaction-binary: the `k_max` best-scoring binary candidates over
///   distinct operand pairs. Falls back to unary with fewer than two operands.
/// * balanced: alternates unary and binary picks.
///
/// Ties in score are broken by a seeded shuffle of the candidate list.
pub fn scripted_propose(strategy: AgentStrategy, seed: u64, ctx: &AgentContext) -> AgentProposal {
    if ctx.k_max == 0 {
        return AgentProposal::empty(format!("{strategy}: generation budget is zero"));
    }
    let reacting = ctx.feedback.last().map_or(false, |f| f.delta < 0.0);
    let allowed: HashSet<Operation> = ctx.operations.iter().copied().collect();
    let family = |primary: &[Operation], secondary: &[Operation]| -> Vec<Operation> {
        let (first, second) = if reacting { (secondary, primary) } else { (primary, secondary) };
        let pick = |ops: &[Operation]| -> Vec<Operation> {
            ops.iter().copied().filter(|o| allowed.contains(o)).collect()
        };
        let mut out = pick(first);
        if out.is_empty() {
            out = pick(second);
        }
        out
    };
    let unary_ops = family(&UNARY_PRIMARY, &UNARY_SECONDARY);
    let binary_ops = family(&BINARY_PRIMARY, &BINARY_SECONDARY);

    let operands: Vec<FeatureExpr> = ctx.operands().into_iter().cloned().collect();
    let binary_possible = operands.len() >= 2 && !binary_ops.is_empty();
    let unary_possible = !operands.is_empty() && !unary_ops.is_empty();

    let slots: Vec<Slot> = (0..ctx.k_max)
        .map(|i| match strategy {
            AgentStrategy::NonlinearUnary => Slot::Unary,
            AgentStrategy::InteractionBinary => Slot::Binary,
            AgentStrategy::Balanced if i % 2 == 0 => Slot::Unary,
            AgentStrategy::Balanced => Slot::Binary,
        })
        .map(|s| match s {
            Slot::Binary if !binary_possible => Slot::Unary,
            Slot::Unary if !unary_possible && binary_possible => Slot::Binary,
            s => s,
        })
        .collect();

    let indicators: Vec<Vec<f64>> = match &ctx.data {
        Some(view) => {
            let labels = view.labels();
            let n_classes = labels.iter().max().map_or(0, |m| m + 1);
            // With two classes both indicators give the same |r|.
            let classes = if n_classes == 2 { 1 } else { n_classes };
            (0..classes)
                .map(|c| labels.iter().map(|&l| f64::from(u8::from(l == c))).collect())
                .collect()
        }
        None => Vec::new(),
    };
    let mut scorer = Scorer {
        ctx,
        indicators,
        taken: HashSet::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ctx.agent_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));

    // Unary: operands by variance, highest first.
    let mut by_variance: Vec<(f64, &FeatureExpr)> = operands
        .iter()
        .map(|e| {
            let var = ctx
                .data
                .as_ref()
                .and_then(|v| v.values(e))
                .map_or(0.0, |v| variance(&v));
            (var, e)
        })
        .collect();
    by_variance.shuffle(&mut rng);
    by_variance.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used_unary: HashSet<String> = HashSet::new();

    // Binary: every ordered pair for non-commutative ops, unordered otherwise.
    let mut binary_pool: Vec<Candidate> = Vec::new();
    if slots.contains(&Slot::Binary) {
        for (i, a) in operands.iter().enumerate() {
            for (j, b) in operands.iter().enumerate() {
                if i == j {
                    continue;
                }
                for &op in &binary_ops {
                    if op.is_commutative() && j < i {
                        continue;
                    }
                    if let Some(c) = scorer.candidate(op, &[a.clone(), b.clone()]) {
                        binary_pool.push(c);
                    }
                }
            }
        }
        binary_pool.shuffle(&mut rng);
        binary_pool.sort_by(by_score_desc);
    }
    let mut used_pairs: HashSet<(String, String)> = HashSet::new();

    let mut chosen: Vec<Candidate> = Vec::new();
    for slot in slots {
        let pick = match slot {
            Slot::Unary => by_variance
                .iter()
                .filter(|(_, e)| !used_unary.contains(e.name()))
                .find_map(|(_, e)| {
                    let mut best: Option<Candidate> = None;
                    for &op in &unary_ops {
                        if let Some(c) = scorer.candidate(op, &[(*e).clone()]) {
                            if best.as_ref().map_or(true, |b| c.score > b.score) {
                                best = Some(c);
                            }
                        }
                    }
                    best
                }),
            Slot::Binary => binary_pool
                .iter()
                .find(|c| {
                    let mut key = (c.operands[0].name().to_owned(), c.operands[1].name().to_owned());
                    if key.1 < key.0 {
                        std::mem::swap(&mut key.0, &mut key.1);
                    }
                    !used_pairs.contains(&key) && !scorer.taken.contains(c.expr.name())
                })
                .cloned(),
        };
        let Some(c) = pick else { continue };
        match c.operands.as_slice() {
            [x] => {
                used_unary.insert(x.name().to_owned());
            }
            [x, y] => {
                let (a, b) = (x.name().to_owned(), y.name().to_owned());
                used_pairs.insert(if a <= b { (a, b) } else { (b, a) });
            }
            _ => {}
        }
        scorer.taken.insert(c.expr.name().to_owned());
        chosen.push(c);
    }

    let mut actions: Vec<Action> = chosen
        .iter()
        .map(|c| Action::Generate {
            op: c.op,
            operands: c.operands.iter().map(|e| e.name().to_owned()).collect(),
        })
        .collect();

    let mut notes: Vec<String> = chosen
        .iter()
        .map(|c| format!("{} (relevance {:.3})", c.expr.name(), c.score))
        .collect();

    // Prune the weakest generated feature after a losing round.
    if reacting && ctx.allow_drops {
        let weakest = ctx
            .subset
            .exprs()
            .iter()
            .filter(|e| !e.is_base())
            .filter_map(|e| {
                let v = ctx.data.as_ref()?.values(e)?;
                Some((relevance(&v, &scorer.indicators), e))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.name().cmp(b.1.name())));
        if let Some((r, e)) = weakest {
            actions.push(Action::Drop {
                feature: e.name().to_owned(),
            });
            notes.push(format!("dropped {} (relevance {r:.3})", e.name()));
        }
    }

    let mut rationale = format!("{strategy}: {}", strategy.description());
    if reacting {
        let d = ctx.feedback.last().map_or(0.0, |f| f.delta);
        rationale.push_str(&format!(
            "; previous round changed the metric by {d:+.4}, switching to secondary operations"
        ));
    }
    if notes.is_empty() {
        rationale.push_str("; no admissible candidates");
    } else {
        rationale.push_str("; chose ");
        rationale.push_str(&notes.join(", "));
    }
    AgentProposal { actions, rationale }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{FeedbackEntry, MetricSummary, TrainingView};
    use crate::data::Dataset;
    use crate::expr::{EvalCache, FeatureSubset};
    use std::sync::Arc;

    /// f1*f2 drives the label, f3 is loosely related, f4 is noise.
    fn toy_view() -> (FeatureSubset, TrainingView) {
        let f1 = [1.0, -2.0, 3.0, -1.0, 2.0, -3.0, 1.5, -0.5, 2.5, -1.5, 0.7, -2.2];
        let f2 = [2.0, 1.0, -1.0, -2.0, 1.5, 0.5, -3.0, 2.0, 1.0, -1.0, -0.4, -1.1];
        let f3 = [0.3, 0.1, 0.2, 0.4, 0.6, 0.5, 0.9, 0.8, 0.7, 1.0, 1.2, 1.1];
        let f4 = [5.0, 1.0, 4.0, 2.0, 3.0, 9.0, 7.0, 6.0, 8.0, 0.0, 2.0, 4.0];
        let y: Vec<usize> = f1.iter().zip(&f2).map(|(a, b)| usize::from(a * b > 0.0)).collect();
        let cols = [("f1", f1), ("f2", f2), ("f3", f3), ("f4", f4)]
            .into_iter()
            .map(|(n, v)| (n.to_string(), v.to_vec()))
            .collect();
        let d = Arc::new(Dataset::new(cols, y).unwrap());
        let subset = FeatureSubset::from_dataset(&d);
        let view = TrainingView {
            rows: (0..d.n_samples()).collect::<Vec<_>>().into(),
            dataset: d,
            cache: Arc::new(EvalCache::new()),
        };
        (subset, view)
    }

    fn ctx(k_max: usize) -> AgentContext {
        let (subset, view) = toy_view();
        AgentContext {
            k_max,
            ..AgentContext::new(0, subset)
        }
        .with_data(view)
    }

    fn gens(p: &AgentProposal) -> Vec<(Operation, Vec<String>)> {
        p.actions
            .iter()
            .filter_map(|a| match a {
                Action::Generate { op, operands } => Some((*op, operands.clone())),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn interaction_agent_finds_planted_pair() {
        let p = scripted_propose(AgentStrategy::InteractionBinary, 7, &ctx(2));
        let g = gens(&p);
        assert_eq!(g.len(), 2);
        assert!(g.iter().all(|(op, _)| matches!(op, Operation::Multiply | Operation::Divide)));
        // Brute-force check: the top-ranked pick is the best of all
        // multiply/divide candidates by |corr| with the label.
        let (subset, view) = toy_view();
        let y: Vec<f64> = view.labels().iter().map(|&l| l as f64).collect();
        let mut best = (0.0, String::new());
        for a in subset.exprs() {
            for b in subset.exprs() {
                for op in [Operation::Multiply, Operation::Divide] {
                    if a == b {
                        continue;
                    }
                    let e = FeatureExpr::binary(op, a.clone(), b.clone()).unwrap();
                    if let Some(v) = view.values(&e) {
                        let r = pearson(&v, &y).abs();
                        if r > best.0 {
                            best = (r, e.name().to_owned());
                        }
                    }
                }
            }
        }
        assert_eq!(best.1, "multiply(f1,f2)");
        assert_eq!(g[0], (Operation::Multiply, vec!["f1".to_string(), "f2".to_string()]));
    }

    #[test]
    fn deterministic() {
        let c = ctx(3);
        for s in AgentStrategy::DEFAULT_ROSTER {
            assert_eq!(scripted_propose(s, 11, &c), scripted_propose(s, 11, &c));
        }
    }

    #[test]
    fn zero_budget_is_empty() {
        assert!(scripted_propose(AgentStrategy::Balanced, 1, &ctx(0)).is_empty());
    }

    #[test]
    fn negative_delta_switches_family() {
        let mut c = ctx(2);
        c.feedback.push(FeedbackEntry {
            iteration: 1,
            metrics: MetricSummary {
                accuracy: 0.5,
                precision: 0.5,
                recall: 0.5,
                f1: 0.5,
            },
            delta: -0.02,
        });
        let g = gens(&scripted_propose(AgentStrategy::InteractionBinary, 7, &c));
        assert!(!g.is_empty());
        assert!(g.iter().all(|(op, _)| matches!(op, Operation::Plus | Operation::Subtract)));
        let u = gens(&scripted_propose(AgentStrategy::NonlinearUnary, 7, &c));
        assert!(u.iter().all(|(op, _)| UNARY_SECONDARY.contains(op)));
    }

    #[test]
    fn single_operand_falls_back_to_unary() {
        let (_, view) = toy_view();
        let c = AgentContext {
            k_max: 2,
            ..AgentContext::new(0, FeatureSubset::new([FeatureExpr::base("f4")], None))
        }
        .with_data(view);
        let g = gens(&scripted_propose(AgentStrategy::InteractionBinary, 7, &c));
        assert!(!g.is_empty());
        assert!(g.iter().all(|(op, args)| op.is_unary() && args == &["f4"]));
    }

    #[test]
    fn proposals_validate() {
        let c = ctx(3);
        for s in AgentStrategy::DEFAULT_ROSTER {
            let p = scripted_propose(s, 5, &c);
            assert!(p.generate_count() <= 3);
            assert_eq!(c.validate(p.clone()), Ok(p));
        }
    }

    #[test]
    fn respects_operation_restriction() {
        let mut c = ctx(3);
        c.operations = vec![Operation::Sin, Operation::Subtract];
        for s in AgentStrategy::DEFAULT_ROSTER {
            let p = scripted_propose(s, 5, &c);
            assert!(gens(&p).iter().all(|(op, _)| c.operations.contains(op)));
        }
    }
}
