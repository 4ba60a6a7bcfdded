//! Layered multi-agent generation followed by UCB tree refinement.
//!
//! Every evaluated feature subset is a [`GenerationNode`]. The root holds the
//! raw columns. Generation layers grow one chain per agent; afterwards a few
//! rounds pick the most promising nodes by UCB and expand them with
//! operations their lineage has not used yet.

use std::collections::{HashMap, HashSet};
use std::io::{self, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    Action, Agent, AgentContext, AgentError, AgentProposal, FeedbackEntry, MetricSummary,
    TrainingView,
};
use crate::data::{self, DataError, Dataset};
use crate::eval::{EvalError, EvalReport, Evaluator, Metric, ModelSpec, Outcome, Protocol};
use crate::expr::{self, FeatureExpr, FeatureSubset};
use crate::ops::Operation;

/// Version of the node log layout.
pub const LOG_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("every agent returned an empty proposal in layer {layer}")]
    AllAgentsEmpty { layer: usize },
    #[error("no node can be expanded")]
    NothingToSelect,
    #[error("the root node has no UCB score")]
    RootHasNoUcb,
    #[error("no node with id {0}")]
    UnknownNode(usize),
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
}

impl SearchError {
    pub fn kind(&self) -> &'static str {
        match self {
            SearchError::Data(e) => e.kind(),
            SearchError::Eval(e) => e.kind(),
            SearchError::AllAgentsEmpty { .. } => "AllAgentsEmpty",
            SearchError::NothingToSelect => "NothingToSelect",
            SearchError::RootHasNoUcb => "RootHasNoUcb",
            SearchError::UnknownNode(_) => "UnknownNode",
            SearchError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Root,
    Generate,
    Expand,
}

/// One evaluated feature subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationNode {
    pub id: usize,
    pub parent: Option<usize>,
    /// Depth in the tree; 0 for the root.
    pub layer: usize,
    pub phase: Phase,
    pub subset: FeatureSubset,
    pub visits: u64,
    /// Mean delta of the children, or the node's own delta for a leaf.
    pub value: f64,
    pub theta: EvalReport,
    /// Search metric of `theta`.
    pub score: f64,
    /// `score` minus the parent's score.
    pub delta: f64,
    pub agent: Option<usize>,
    pub strategy: Option<String>,
    pub actions: Vec<Action>,
    pub rationale: String,
    /// Generated features that could not be added, with the reason.
    pub rejected: Vec<(String, String)>,
    /// Features left out of the model matrix, with the reason.
    pub excluded: Vec<(String, String)>,
    pub children: Vec<usize>,
}

/// `w + c * sqrt(2 ln(parent_visits) / visits)`.
pub fn ucb_score(w: f64, visits: u64, parent_visits: u64, c: f64) -> f64 {
    w + c * (2.0 * (parent_visits as f64).ln() / visits as f64).sqrt()
}

/// Mean of `child_deltas`, or `own_delta` when there are none.
pub fn node_value(child_deltas: &[f64], own_delta: f64) -> f64 {
    if child_deltas.is_empty() {
        own_delta
    } else {
        child_deltas.iter().sum::<f64>() / child_deltas.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    pub nodes: Vec<GenerationNode>,
    /// Node ids of generation layer `t` at index `t - 1`.
    pub layers: Vec<Vec<usize>>,
    /// Node ids created by each refinement round.
    pub rounds: Vec<Vec<usize>>,
    pub exploration: f64,
    pub max_layers: usize,
}

/// What a new node is made of, before it is attached.
#[derive(Debug, Clone)]
pub struct NodeDraft {
    pub parent: usize,
    pub phase: Phase,
    pub subset: FeatureSubset,
    pub outcome: Outcome,
    pub agent: Option<usize>,
    pub strategy: Option<String>,
    pub actions: Vec<Action>,
    pub rationale: String,
    pub rejected: Vec<(String, String)>,
}

impl SearchTree {
    pub fn new(root: FeatureSubset, theta: EvalReport, score: f64, exploration: f64, max_layers: usize) -> Self {
        SearchTree {
            nodes: vec![GenerationNode {
                id: 0,
                parent: None,
                layer: 0,
                phase: Phase::Root,
                subset: root,
                visits: 1,
                value: 0.0,
                theta,
                score,
                delta: 0.0,
                agent: None,
                strategy: None,
                actions: Vec::new(),
                rationale: String::new(),
                rejected: Vec::new(),
                excluded: Vec::new(),
                children: Vec::new(),
            }],
            layers: Vec::new(),
            rounds: Vec::new(),
            exploration,
            max_layers,
        }
    }

    pub fn root(&self) -> &GenerationNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: usize) -> Result<&GenerationNode, SearchError> {
        self.nodes.get(id).ok_or(SearchError::UnknownNode(id))
    }

    /// Adds a child of `draft.parent` and returns its id. The parent's value
    /// is recomputed from all of its children and the root's visit count
    /// goes up by one.
    pub fn attach(&mut self, draft: NodeDraft, metric: Metric) -> Result<usize, SearchError> {
        let parent = self.node(draft.parent)?;
        let score = metric.of(&draft.outcome.report);
        let delta = score - parent.score;
        let id = self.nodes.len();
        let layer = parent.layer + 1;
        self.nodes.push(GenerationNode {
            id,
            parent: Some(draft.parent),
            layer,
            phase: draft.phase,
            subset: draft.subset,
            visits: 1,
            value: delta,
            theta: draft.outcome.report,
            score,
            delta,
            agent: draft.agent,
            strategy: draft.strategy,
            actions: draft.actions,
            rationale: draft.rationale,
            rejected: draft.rejected,
            excluded: draft.outcome.excluded,
            children: Vec::new(),
        });
        self.nodes[draft.parent].children.push(id);
        self.refresh_value(draft.parent);
        self.nodes[0].visits += 1;
        debug_assert!(self.value_drift() < 1e-12);
        Ok(id)
    }

    fn refresh_value(&mut self, id: usize) {
        let deltas: Vec<f64> = self.nodes[id].children.iter().map(|&c| self.nodes[c].delta).collect();
        let own = self.nodes[id].delta;
        self.nodes[id].value = node_value(&deltas, own);
    }

    /// Largest gap between a node's stored value and the mean of its
    /// children's deltas.
    pub fn value_drift(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| {
                let deltas: Vec<f64> = n.children.iter().map(|&c| self.nodes[c].delta).collect();
                (n.value - node_value(&deltas, n.delta)).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn ucb(&self, id: usize) -> Result<f64, SearchError> {
        let n = self.node(id)?;
        let parent = n.parent.ok_or(SearchError::RootHasNoUcb)?;
        Ok(ucb_score(n.value, n.visits, self.nodes[parent].visits, self.exploration))
    }

    /// Root first.
    pub fn path(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Top `m` expandable non-root nodes by UCB; ties go to the higher
    /// score, then the lower id.
    pub fn select(&self, m: usize) -> Result<Vec<usize>, SearchError> {
        let mut scored: Vec<(f64, f64, usize)> = self
            .nodes
            .iter()
            .filter(|n| n.parent.is_some() && n.layer < self.max_layers)
            .map(|n| Ok((self.ucb(n.id)?, n.score, n.id)))
            .collect::<Result<_, SearchError>>()?;
        if scored.is_empty() {
            return Err(SearchError::NothingToSelect);
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
        Ok(scored.into_iter().take(m).map(|s| s.2).collect())
    }

    /// Counts one visit on every node from the root down to `id`.
    pub fn visit_path(&mut self, id: usize) {
        for n in self.path(id) {
            self.nodes[n].visits += 1;
        }
    }

    /// Best node of each generation layer, then of each refinement round.
    pub fn optima(&self) -> (Vec<usize>, Vec<usize>) {
        let best = |ids: &[usize]| {
            ids.iter()
                .copied()
                .reduce(|a, b| if self.nodes[b].score > self.nodes[a].score { b } else { a })
        };
        (
            self.layers.iter().filter_map(|l| best(l)).collect(),
            self.rounds.iter().filter_map(|r| best(r)).collect(),
        )
    }

    /// Argmax of the score over the root and the per-layer and per-round
    /// optima. Only a strict improvement replaces an earlier candidate.
    pub fn best(&self) -> usize {
        let (layers, rounds) = self.optima();
        std::iter::once(0)
            .chain(layers)
            .chain(rounds)
            .reduce(|a, b| if self.nodes[b].score > self.nodes[a].score { b } else { a })
            .unwrap_or(0)
    }

    /// Leaf with the highest value; `None` when the root has no children.
    pub fn mcts_choice(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter(|n| n.parent.is_some() && n.children.is_empty())
            .max_by(|a, b| {
                a.value
                    .total_cmp(&b.value)
                    .then(a.score.total_cmp(&b.score))
                    .then(b.id.cmp(&a.id))
            })
            .map(|n| n.id)
    }
}

fn default_train_fraction() -> f64 {
    0.55
}
fn default_k_max() -> usize {
    crate::agents::DEFAULT_K_MAX
}
fn default_iterations() -> usize {
    10
}
fn default_rounds() -> usize {
    5
}
fn default_select() -> usize {
    2
}
fn default_exploration() -> f64 {
    1.4142
}
fn default_patience() -> usize {
    3
}
fn default_model() -> ModelSpec {
    ModelSpec::Knn { k: 5 }
}
fn default_max_depth() -> usize {
    expr::DEFAULT_MAX_DEPTH
}

/// Search settings. Defaults: 55% training split, k_max 3, 10 layers,
/// 5 refinement rounds expanding 2 nodes each, C = 1.4142, patience 3,
/// KNN with k = 5, accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Use k-fold cross-validation instead of a holdout split when set.
    #[serde(default)]
    pub cv_folds: Option<usize>,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_rounds")]
    pub mcts_rounds: usize,
    #[serde(default = "default_select")]
    pub mcts_select: usize,
    #[serde(default = "default_exploration")]
    pub exploration: f64,
    /// Layers without a new best before generation stops; 0 disables.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub allow_drops: bool,
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    /// Give each agent a disjoint share of the original columns as operands.
    #[serde(default)]
    pub partition_features: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            seed: 0,
            train_fraction: default_train_fraction(),
            cv_folds: None,
            k_max: default_k_max(),
            iterations: default_iterations(),
            mcts_rounds: default_rounds(),
            mcts_select: default_select(),
            exploration: default_exploration(),
            patience: default_patience(),
            model: default_model(),
            metric: Metric::default(),
            allow_drops: false,
            max_depth: default_max_depth(),
            partition_features: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConfig(m.to_owned()));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie strictly between 0 and 1");
        }
        if !(self.exploration >= 0.0 && self.exploration.is_finite()) {
            return bad("exploration must be a finite non-negative number");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if matches!(self.cv_folds, Some(k) if k < 2) {
            return bad("cv_folds must be at least 2");
        }
        self.model.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    Patience { layer: usize },
    AllAgentsEmpty { layer: usize },
}

/// Outcome of a search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: SearchConfig,
    pub dataset_id: u64,
    /// Strategy label of each agent, by id.
    pub agents: Vec<String>,
    pub tree: SearchTree,
    /// Node holding the best subset.
    pub best: usize,
    /// Leaf with the highest value.
    pub mcts_choice: Option<usize>,
    pub layer_optima: Vec<usize>,
    pub round_optima: Vec<usize>,
    pub stop_reason: StopReason,
}

impl RunResult {
    pub fn best_node(&self) -> &GenerationNode {
        &self.tree.nodes[self.best]
    }

    pub fn baseline(&self) -> f64 {
        self.tree.root().score
    }

    pub fn improvement(&self) -> f64 {
        self.best_node().score - self.baseline()
    }

    /// Writes the node log: a header line, one line per node in id order,
    /// and a closing result line.
    pub fn write_log(&self, mut w: impl Write) -> io::Result<()> {
        let line = |w: &mut dyn Write, v: serde_json::Value| -> io::Result<()> {
            serde_json::to_writer(&mut *w, &v)?;
            w.write_all(b"\n")
        };
        line(
            &mut w,
            serde_json::json!({
                "record": "header",
                "schema": LOG_SCHEMA,
                "dataset_id": format!("{:016x}", self.dataset_id),
                "stratified": true,
                "agents": self.agents,
                "settings": self.config,
            }),
        )?;
        for n in &self.tree.nodes {
            line(&mut w, serde_json::to_value(NodeRecord::from(n))?)?;
        }
        line(
            &mut w,
            serde_json::json!({
                "record": "result",
                "best": self.best,
                "mcts_choice": self.mcts_choice,
                "baseline": self.baseline(),
                "best_score": self.best_node().score,
                "improvement": self.improvement(),
                "layer_optima": self.layer_optima,
                "round_optima": self.round_optima,
                "stop": self.stop_reason,
            }),
        )
    }

    pub fn log_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_log(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("log is UTF-8")
    }
}

/// One node line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub record: String,
    pub id: usize,
    pub parent: Option<usize>,
    pub layer: usize,
    pub phase: Phase,
    pub agent: Option<usize>,
    pub strategy: Option<String>,
    pub actions: Vec<String>,
    pub features: Vec<String>,
    pub metrics: MetricSummary,
    pub score: f64,
    pub delta: f64,
    pub w: f64,
    pub visits: u64,
    pub rationale: String,
    pub rejected: Vec<(String, String)>,
    pub excluded: Vec<(String, String)>,
}

impl From<&GenerationNode> for NodeRecord {
    fn from(n: &GenerationNode) -> Self {
        NodeRecord {
            record: "node".into(),
            id: n.id,
            parent: n.parent,
            layer: n.layer,
            phase: n.phase,
            agent: n.agent,
            strategy: n.strategy.clone(),
            actions: n.actions.iter().map(ToString::to_string).collect(),
            features: n.subset.names(),
            metrics: MetricSummary::from(&n.theta),
            score: n.score,
            delta: n.delta,
            w: n.value,
            visits: n.visits,
            rationale: n.rationale.clone(),
            rejected: n.rejected.clone(),
            excluded: n.excluded.clone(),
        }
    }
}

/// Applies validated actions to `base`. Generated columns that fail to
/// evaluate are left out and reported.
fn apply_actions(
    base: &FeatureSubset,
    actions: &[Action],
    evaluator: &Evaluator,
) -> (FeatureSubset, Vec<(String, String)>) {
    let mut subset = base.clone();
    subset.origin = None;
    let mut rejected = Vec::new();
    for a in actions {
        match a {
            Action::Generate { op, operands } => {
                let resolved: Option<Vec<FeatureExpr>> =
                    operands.iter().map(|o| base.get(o).cloned()).collect();
                let Some(e) = resolved.and_then(|r| FeatureExpr::apply(*op, &r).ok()) else {
                    rejected.push((a.to_string(), "operands not in the subset".into()));
                    continue;
                };
                if subset.contains(e.name()) {
                    continue;
                }
                match evaluator.cache().evaluate(&e, evaluator.dataset()) {
                    Ok(_) => {
                        subset.push(e);
                    }
                    Err(err) => rejected.push((e.name().to_owned(), err.to_string())),
                }
            }
            Action::Drop { feature } => {
                if let Some(e) = subset.get(feature) {
                    if !e.is_base() {
                        subset.remove(feature);
                    }
                }
            }
        }
    }
    (subset, rejected)
}

fn subset_key(s: &FeatureSubset) -> Vec<String> {
    let mut k = s.names();
    k.sort_unstable();
    k
}

/// Drives one search over a dataset with a fixed agent roster.
pub struct Search<'a> {
    pub config: SearchConfig,
    pub evaluator: Evaluator,
    pub agents: &'a [Box<dyn Agent>],
    pub tree: SearchTree,
    /// Current node of each agent's generation chain.
    heads: Vec<usize>,
    memo: HashMap<Vec<String>, Outcome>,
    view: TrainingView,
}

/// What one agent produced for one parent.
struct Proposal {
    parent: usize,
    agent: usize,
    proposal: AgentProposal,
}

impl<'a> Search<'a> {
    /// Splits the data, evaluates the raw columns and creates the root.
    pub fn init_root(
        config: SearchConfig,
        dataset: Arc<Dataset>,
        agents: &'a [Box<dyn Agent>],
    ) -> Result<Self, SearchError> {
        config.validate()?;
        let protocol = match config.cv_folds {
            Some(k) => Protocol::KFold(data::kfold(&dataset, k, config.seed)?),
            None => Protocol::Holdout(data::split(&dataset, config.train_fraction, config.seed)?),
        };
        let evaluator = Evaluator::new(dataset.clone(), protocol, config.model);
        let root = FeatureSubset::from_dataset(&dataset);
        let outcome = evaluator.evaluate(&root)?;
        let score = config.metric.of(&outcome.report);
        let mut tree = SearchTree::new(root.clone(), outcome.report.clone(), score, config.exploration, config.iterations);
        tree.nodes[0].excluded = outcome.excluded.clone();
        let view = TrainingView {
            dataset,
            rows: evaluator.training_rows().into(),
            cache: evaluator.cache().clone(),
        };
        let mut memo = HashMap::new();
        memo.insert(subset_key(&root), outcome);
        Ok(Search {
            heads: vec![0; agents.len()],
            config,
            evaluator,
            agents,
            tree,
            memo,
            view,
        })
    }

    fn feedback(&self, id: usize) -> Vec<FeedbackEntry> {
        self.tree
            .path(id)
            .into_iter()
            .skip(1)
            .map(|n| {
                let n = &self.tree.nodes[n];
                FeedbackEntry {
                    iteration: n.layer,
                    metrics: MetricSummary::from(&n.theta),
                    delta: n.delta,
                }
            })
            .collect()
    }

    fn context(&self, agent: usize, node: usize, iteration: usize, peers: &[(usize, String)]) -> AgentContext {
        let n = &self.tree.nodes[node];
        let visible = self.config.partition_features.then(|| {
            let share = self.tree.root().subset.exprs().iter().enumerate();
            share
                .filter(|(i, _)| i % self.agents.len() == agent)
                .map(|(_, e)| e.name().to_owned())
                .chain(n.subset.exprs().iter().filter(|e| !e.is_base()).map(|e| e.name().to_owned()))
                .collect::<HashSet<_>>()
        });
        let mut ctx = AgentContext::new(agent, n.subset.clone()).with_data(self.view.clone());
        ctx.iteration = iteration;
        ctx.feedback = self.feedback(node);
        ctx.peer_rationales = peers.iter().filter(|(id, _)| *id != agent).cloned().collect();
        ctx.rejected = n.rejected.clone();
        ctx.k_max = self.config.k_max;
        ctx.max_depth = self.config.max_depth;
        ctx.allow_drops = self.config.allow_drops;
        ctx.visible = visible;
        ctx
    }

    /// Latest rationale of every agent, from the newest generation layer.
    fn peer_rationales(&self) -> Vec<(usize, String)> {
        self.tree
            .layers
            .last()
            .map(|l| {
                l.iter()
                    .filter_map(|&id| {
                        let n = &self.tree.nodes[id];
                        Some((n.agent?, n.rationale.clone()))
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    fn ask(&self, agent: usize, ctx: &AgentContext) -> AgentProposal {
        match self.agents[agent].propose(ctx) {
            Ok(p) => match ctx.validate(p) {
                Ok(p) => p,
                Err(reason) => AgentProposal::empty(format!("invalid proposal: {reason}")),
            },
            Err(AgentError::AgentUnavailable { attempts, last }) => {
                log::warn!("agent {agent} unavailable after {attempts} attempt(s): {last}");
                AgentProposal::empty(format!("agent unavailable: {last}"))
            }
        }
    }

    /// Applies and evaluates proposals, returning drafts in input order.
    /// Empty proposals, unchanged subsets and subsets already present among
    /// the parent's children (or earlier in this batch) yield no draft.
    fn realize(&mut self, proposals: Vec<Proposal>, phase: Phase) -> Result<Vec<NodeDraft>, SearchError> {
        let mut pending = Vec::new();
        let mut seen: HashSet<(usize, Vec<String>)> = HashSet::new();
        for p in proposals {
            if p.proposal.is_empty() {
                continue;
            }
            let parent = &self.tree.nodes[p.parent];
            let (subset, rejected) = apply_actions(&parent.subset, &p.proposal.actions, &self.evaluator);
            let key = subset_key(&subset);
            if key == subset_key(&parent.subset) {
                continue;
            }
            let sibling = parent
                .children
                .iter()
                .any(|&c| subset_key(&self.tree.nodes[c].subset) == key);
            if sibling || !seen.insert((p.parent, key.clone())) {
                continue;
            }
            pending.push((p, subset, rejected, key));
        }

        let mut todo: Vec<(&Vec<String>, &FeatureSubset)> = Vec::new();
        for (_, subset, _, key) in &pending {
            if !self.memo.contains_key(key) && !todo.iter().any(|(k, _)| *k == key) {
                todo.push((key, subset));
            }
        }
        let evaluator = &self.evaluator;
        let fresh: Vec<(Vec<String>, Result<Outcome, EvalError>)> = todo
            .par_iter()
            .map(|(k, s)| ((*k).clone(), evaluator.evaluate(s)))
            .collect();
        for (k, r) in fresh {
            self.memo.insert(k, r?);
        }

        Ok(pending
            .into_iter()
            .map(|(p, subset, rejected, key)| NodeDraft {
                parent: p.parent,
                phase,
                subset,
                outcome: self.memo[&key].clone(),
                agent: Some(p.agent),
                strategy: Some(self.agents[p.agent].strategy()),
                actions: p.proposal.actions,
                rationale: p.proposal.rationale,
                rejected,
            })
            .collect())
    }

    /// Asks every agent to extend its chain and records the results as
    /// generation layer `t`.
    pub fn run_layer(&mut self, t: usize) -> Result<Vec<usize>, SearchError> {
        let peers = self.peer_rationales();
        let contexts: Vec<AgentContext> = (0..self.agents.len())
            .map(|a| self.context(a, self.heads[a], t, &peers))
            .collect();
        let proposals: Vec<Proposal> = contexts
            .par_iter()
            .enumerate()
            .map(|(a, ctx)| Proposal {
                parent: self.heads[a],
                agent: a,
                proposal: self.ask(a, ctx),
            })
            .collect();
        let all_empty = proposals.iter().all(|p| p.proposal.is_empty());
        let drafts = self.realize(proposals, Phase::Generate)?;
        let mut ids = Vec::with_capacity(drafts.len());
        for d in drafts {
            let agent = d.agent.expect("generation drafts have an agent");
            let id = self.tree.attach(d, self.config.metric)?;
            self.heads[agent] = id;
            ids.push(id);
        }
        self.tree.layers.push(ids.clone());
        if all_empty {
            return Err(SearchError::AllAgentsEmpty { layer: t });
        }
        Ok(ids)
    }

    /// Operations absent from the node's subset, or all of them if every
    /// operation already occurs.
    pub fn novel_operations(subset: &FeatureSubset) -> Vec<Operation> {
        let used = subset.operations();
        let fresh: Vec<Operation> = Operation::ALL.into_iter().filter(|o| !used.contains(o)).collect();
        if fresh.is_empty() {
            Operation::ALL.to_vec()
        } else {
            fresh
        }
    }

    /// Asks every agent for a child of `node` restricted to novel operations.
    pub fn expand(&mut self, nodes: &[usize], round: usize) -> Result<Vec<usize>, SearchError> {
        let peers = self.peer_rationales();
        let mut contexts = Vec::new();
        for &node in nodes {
            let ops = Self::novel_operations(&self.tree.node(node)?.subset);
            for a in 0..self.agents.len() {
                let mut ctx = self.context(a, node, self.tree.nodes[node].layer + 1, &peers);
                ctx.operations = ops.clone();
                contexts.push((node, a, ctx));
            }
        }
        let proposals: Vec<Proposal> = contexts
            .par_iter()
            .map(|(node, a, ctx)| Proposal {
                parent: *node,
                agent: *a,
                proposal: self.ask(*a, ctx),
            })
            .collect();
        let drafts = self.realize(proposals, Phase::Expand)?;
        let mut ids = Vec::with_capacity(drafts.len());
        for d in drafts {
            ids.push(self.tree.attach(d, self.config.metric)?);
        }
        log::debug!("round {round}: expanded {nodes:?} into {ids:?}");
        Ok(ids)
    }

    pub fn best_subset(self, stop_reason: StopReason) -> RunResult {
        let (layer_optima, round_optima) = self.tree.optima();
        RunResult {
            best: self.tree.best(),
            mcts_choice: self.tree.mcts_choice(),
            layer_optima,
            round_optima,
            stop_reason,
            dataset_id: self.evaluator.dataset().id(),
            agents: self.agents.iter().map(|a| a.strategy()).collect(),
            config: self.config,
            tree: self.tree,
        }
    }

    /// Generation layers, then refinement rounds.
    pub fn execute(mut self) -> Result<RunResult, SearchError> {
        let mut stop = StopReason::Completed;
        let mut best = self.tree.root().score;
        let mut flat = 0;
        for t in 1..=self.config.iterations {
            match self.run_layer(t) {
                Ok(_) => {}
                Err(SearchError::AllAgentsEmpty { layer }) => {
                    stop = StopReason::AllAgentsEmpty { layer };
                    break;
                }
                Err(e) => return Err(e),
            }
            let layer_best = self.tree.layers[t - 1]
                .iter()
                .map(|&id| self.tree.nodes[id].score)
                .fold(f64::NEG_INFINITY, f64::max);
            if layer_best > best {
                best = layer_best;
                flat = 0;
            } else {
                flat += 1;
            }
            if self.config.patience > 0 && flat >= self.config.patience {
                stop = StopReason::Patience { layer: t };
                break;
            }
        }
        for round in 1..=self.config.mcts_rounds {
            let selected = match self.tree.select(self.config.mcts_select) {
                Ok(s) => s,
                Err(SearchError::NothingToSelect) => break,
                Err(e) => return Err(e),
            };
            for &id in &selected {
                self.tree.visit_path(id);
            }
            let ids = self.expand(&selected, round)?;
            self.tree.rounds.push(ids);
        }
        Ok(self.best_subset(stop))
    }
}

/// Runs a full search.
pub fn run(config: &SearchConfig, dataset: Arc<Dataset>, agents: &[Box<dyn Agent>]) -> Result<RunResult, SearchError> {
    Search::init_root(config.clone(), dataset, agents)?.execute()
}
