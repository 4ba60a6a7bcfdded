//! Feature-generation agents.
//!
//! An agent receives an immutable [`AgentContext`] snapshot (its current
//! subset, its feedback history, what its peers said last round) and returns
//! an [`AgentProposal`]. Two kinds exist: a deterministic [`ScriptedAgent`]
//! and an [`LlmAgent`] speaking the line grammar in [`wire`] over HTTP.

pub mod llm;
pub mod prompt;
pub mod scripted;
pub mod wire;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::eval::EvalReport;
use crate::expr::{self, EvalCache, FeatureExpr, FeatureSubset};
use crate::ops::Operation;

pub use llm::{ChatMessage, ChatRequest, ChatTransport, HttpTransport, LlmAgent, LlmSettings, TransportError};
pub use prompt::{build_prompt, PromptTemplate};
pub use scripted::{scripted_propose, ScriptedAgent};
pub use wire::{parse_response, render, Action, AgentProposal, MalformedReason, MalformedResponse};

/// Default number of GEN actions an agent may emit per round.
pub const DEFAULT_K_MAX: usize = 3;
/// Extra attempts after a malformed reply or a transport failure.
pub const DEFAULT_RETRIES: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("agent unavailable after {attempts} attempt(s): {last}")]
    AgentUnavailable { attempts: usize, last: String },
}

/// Built-in strategies of the scripted agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentStrategy {
    NonlinearUnary,
    InteractionBinary,
    Balanced,
}

impl AgentStrategy {
    /// The default roster, one agent each.
    pub const DEFAULT_ROSTER: [AgentStrategy; 3] = [
        AgentStrategy::NonlinearUnary,
        AgentStrategy::InteractionBinary,
        AgentStrategy::Balanced,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AgentStrategy::NonlinearUnary => "nonlinear-unary",
            AgentStrategy::InteractionBinary => "interaction-binary",
            AgentStrategy::Balanced => "balanced",
        }
    }

    /// Plain-language description, used in prompts for LLM agents too.
    pub fn description(self) -> &'static str {
        match self {
            AgentStrategy::NonlinearUnary => {
                "reshape individual high-variance features with nonlinear unary transforms"
            }
            AgentStrategy::InteractionBinary => {
                "combine pairs of features whose interaction tracks the label"
            }
            AgentStrategy::Balanced => "alternate between unary reshaping and pairwise interactions",
        }
    }
}

impl fmt::Display for AgentStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AgentStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentStrategy::DEFAULT_ROSTER
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// Headline metrics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<&EvalReport> for MetricSummary {
    fn from(r: &EvalReport) -> Self {
        MetricSummary {
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        }
    }
}

/// Outcome of one earlier round as seen by the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub iteration: usize,
    pub metrics: MetricSummary,
    /// Change of the search metric against the previous round (the raw
    /// baseline for iteration 1).
    pub delta: f64,
}

/// Summary statistics of one feature over the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureProfile {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Read access to the training rows, for agents that inspect data.
#[derive(Debug, Clone)]
pub struct TrainingView {
    pub dataset: Arc<Dataset>,
    pub rows: Arc<[usize]>,
    pub cache: Arc<EvalCache>,
}

impl TrainingView {
    /// Values of `e` restricted to the training rows; `None` when the
    /// expression cannot be evaluated on the full dataset.
    pub fn values(&self, e: &FeatureExpr) -> Option<Vec<f64>> {
        let all = self.cache.evaluate(e, &self.dataset).ok()?;
        Some(self.rows.iter().map(|&r| all[r]).collect())
    }

    /// Same as [`TrainingView::values`] without caching `e` itself.
    pub fn candidate_values(&self, e: &FeatureExpr) -> Option<Vec<f64>> {
        let all = self.cache.evaluate_transient(e, &self.dataset).ok()?;
        Some(self.rows.iter().map(|&r| all[r]).collect())
    }

    pub fn labels(&self) -> Vec<usize> {
        let labels = self.dataset.labels();
        self.rows.iter().map(|&r| labels[r]).collect()
    }

    pub fn profile(&self, subset: &FeatureSubset) -> Vec<FeatureProfile> {
        subset
            .exprs()
            .iter()
            .filter_map(|e| {
                let v = self.values(e)?;
                let n = v.len().max(1) as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                Some(FeatureProfile {
                    name: e.name().to_owned(),
                    mean,
                    std: var.sqrt(),
                    min: v.iter().copied().fold(f64::INFINITY, f64::min),
                    max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                })
            })
            .collect()
    }
}

/// Everything an agent sees when asked for a proposal.
#[derive(Debug, Clone)]
pub struct AgentContext {
    pub agent_id: usize,
    /// Round being proposed for (1-based).
    pub iteration: usize,
    pub task: String,
    pub subset: FeatureSubset,
    /// Ordered by iteration, ascending.
    pub feedback: Vec<FeedbackEntry>,
    pub peer_rationales: Vec<(usize, String)>,
    /// Generated features the previous round rejected, with the reason.
    pub rejected: Vec<(String, String)>,
    pub operations: Vec<Operation>,
    pub k_max: usize,
    pub max_depth: usize,
    pub allow_drops: bool,
    /// When set, only these features may be used as operands.
    pub visible: Option<HashSet<String>>,
    pub profiles: Vec<FeatureProfile>,
    pub data: Option<TrainingView>,
}

impl AgentContext {
    /// A context over `subset` with every operation available and no history.
    pub fn new(agent_id: usize, subset: FeatureSubset) -> Self {
        AgentContext {
            agent_id,
            iteration: 1,
            task: "classification".into(),
            subset,
            feedback: Vec::new(),
            peer_rationales: Vec::new(),
            rejected: Vec::new(),
            operations: Operation::ALL.to_vec(),
            k_max: DEFAULT_K_MAX,
            max_depth: expr::DEFAULT_MAX_DEPTH,
            allow_drops: false,
            visible: None,
            profiles: Vec::new(),
            data: None,
        }
    }

    pub fn with_data(mut self, view: TrainingView) -> Self {
        self.profiles = view.profile(&self.subset);
        self.data = Some(view);
        self
    }

    /// Features usable as operands, in subset order.
    pub fn operands(&self) -> Vec<&FeatureExpr> {
        self.subset
            .exprs()
            .iter()
            .filter(|e| self.visible.as_ref().map_or(true, |v| v.contains(e.name())))
            .collect()
    }

    fn resolve(&self, name: &str) -> Result<FeatureExpr, MalformedReason> {
        let canonical = expr::parse(name)
            .map_err(|_| MalformedReason::UnknownFeature(name.to_owned()))?;
        let visible = self
            .visible
            .as_ref()
            .map_or(true, |v| v.contains(canonical.name()));
        match self.subset.get(canonical.name()) {
            Some(e) if visible => Ok(e.clone()),
            _ => Err(MalformedReason::UnknownFeature(name.to_owned())),
        }
    }

    /// Checks a parsed proposal against this context and canonicalizes its
    /// operand names.
    pub fn validate(&self, p: AgentProposal) -> Result<AgentProposal, MalformedReason> {
        let gens = p.generate_count();
        if gens > self.k_max {
            return Err(MalformedReason::TooManyGenerates {
                got: gens,
                max: self.k_max,
            });
        }
        let mut actions = Vec::with_capacity(p.actions.len());
        for a in p.actions {
            actions.push(match a {
                Action::Generate { op, operands } => {
                    if operands.len() != op.arity() {
                        return Err(MalformedReason::ArityMismatch {
                            op,
                            expected: op.arity(),
                            got: operands.len(),
                        });
                    }
                    if !self.operations.contains(&op) {
                        return Err(MalformedReason::OperationNotAllowed(op));
                    }
                    let resolved = operands
                        .iter()
                        .map(|o| self.resolve(o))
                        .collect::<Result<Vec<_>, _>>()?;
                    let e = FeatureExpr::apply(op, &resolved).expect("arity checked above");
                    if e.depth() > self.max_depth {
                        return Err(MalformedReason::DepthExceeded {
                            name: e.name().to_owned(),
                            max: self.max_depth,
                        });
                    }
                    Action::Generate {
                        op,
                        operands: resolved.iter().map(|e| e.name().to_owned()).collect(),
                    }
                }
                Action::Drop { feature } => {
                    if !self.allow_drops {
                        return Err(MalformedReason::DropsDisabled);
                    }
                    let e = expr::parse(&feature)
                        .ok()
                        .and_then(|e| self.subset.get(e.name()).cloned())
                        .ok_or_else(|| MalformedReason::UnknownFeature(feature.clone()))?;
                    if e.is_base() {
                        return Err(MalformedReason::DropOfOriginal(feature));
                    }
                    Action::Drop {
                        feature: e.name().to_owned(),
                    }
                }
            });
        }
        Ok(AgentProposal {
            actions,
            rationale: p.rationale,
        })
    }
}

/// A proposal policy.
pub trait Agent: Send + Sync {
    /// Short label recorded in run logs.
    fn strategy(&self) -> String;

    fn propose(&self, ctx: &AgentContext) -> Result<AgentProposal, AgentError>;
}

impl<A: Agent + ?Sized> Agent for Box<A> {
    fn strategy(&self) -> String {
        (**self).strategy()
    }

    fn propose(&self, ctx: &AgentContext) -> Result<AgentProposal, AgentError> {
        (**self).propose(ctx)
    }
}
