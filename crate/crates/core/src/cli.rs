//! Run configuration and the `run`, `report` and `explain` commands.
//!
//! A run directory holds `config.toml` (the effective settings, enough to
//! repeat the run), `nodes.jsonl` (the node log), `best_subset.csv` and,
//! written last, `summary.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    Agent, AgentStrategy, HttpTransport, LlmAgent, LlmSettings, MetricSummary, ScriptedAgent,
};
use crate::data::{self, DataError, Dataset, LabelColumn};
use crate::eval::{EvalReport, Metric, ModelSpec};
use crate::expr::{self, EvalCache};
use crate::search::{self, NodeRecord, Phase, RunResult, SearchConfig, SearchError};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "nodes.jsonl";
pub const BEST_FILE: &str = "best_subset.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("run directory {0} is incomplete")]
    IncompleteRun(String),
    #[error("feature {0:?} is not in the final subset")]
    UnknownFeature(String),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "InvalidConfig",
            CliError::Data(e) => e.kind(),
            CliError::Search(e) => e.kind(),
            CliError::IncompleteRun(_) => "IncompleteRun",
            CliError::UnknownFeature(_) => "UnknownFeature",
            CliError::Io(_) => "Io",
        }
    }

    /// 2 for problems with the user's input, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_)
            | CliError::Data(_)
            | CliError::Search(SearchError::Data(_) | SearchError::InvalidConfig(_))
            | CliError::IncompleteRun(_)
            | CliError::UnknownFeature(_) => 2,
            CliError::Search(_) | CliError::Io(_) => 3,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Scripted,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Knn,
    DecisionTree,
}

fn d_fraction() -> f64 {
    0.55
}
fn d_agents() -> usize {
    3
}
fn d_kind() -> AgentKind {
    AgentKind::Scripted
}
fn d_k_max() -> usize {
    crate::agents::DEFAULT_K_MAX
}
fn d_iterations() -> usize {
    10
}
fn d_rounds() -> usize {
    5
}
fn d_select() -> usize {
    2
}
fn d_exploration() -> f64 {
    1.4142
}
fn d_patience() -> usize {
    3
}
fn d_model() -> ModelKind {
    ModelKind::Knn
}
fn d_knn_k() -> usize {
    5
}
fn d_tree_depth() -> usize {
    8
}
fn d_tree_leaf() -> usize {
    5
}
fn d_max_depth() -> usize {
    expr::DEFAULT_MAX_DEPTH
}
fn d_output() -> PathBuf {
    PathBuf::from("runs")
}
fn d_llm_url() -> String {
    LlmSettings::default().base_url
}
fn d_llm_model() -> String {
    LlmSettings::default().model
}
fn d_llm_temperature() -> f64 {
    LlmSettings::default().temperature
}
fn d_llm_timeout() -> u64 {
    LlmSettings::default().timeout_secs
}
fn d_llm_retries() -> usize {
    crate::agents::DEFAULT_RETRIES
}

/// Flat run configuration. Every key except `dataset` is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// CSV path; relative paths are resolved against the config file.
    pub dataset: PathBuf,
    /// Label column by header name. Defaults to the last column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_column: Option<String>,
    /// Label column by 0-based position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_index: Option<usize>,
    #[serde(default)]
    pub drop_missing: bool,
    #[serde(default = "d_fraction")]
    pub train_fraction: f64,
    /// 0 for a single stratified holdout split.
    #[serde(default)]
    pub cv_folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_agents")]
    pub agents: usize,
    #[serde(default = "d_kind")]
    pub agent_kind: AgentKind,
    /// Per-agent kinds; overrides `agent_kind` where present.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agent_kinds: Vec<AgentKind>,
    /// Per-agent strategies. Scripted agents need one of the built-in tags;
    /// LLM agents accept free text. Defaults cycle through the built-ins.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agent_strategies: Vec<String>,
    #[serde(default = "d_k_max")]
    pub k_max: usize,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default = "d_rounds")]
    pub mcts_rounds: usize,
    #[serde(default = "d_select")]
    pub mcts_select: usize,
    #[serde(default = "d_exploration")]
    pub exploration: f64,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_model")]
    pub model: ModelKind,
    #[serde(default = "d_knn_k")]
    pub knn_k: usize,
    #[serde(default = "d_tree_depth")]
    pub tree_max_depth: usize,
    #[serde(default = "d_tree_leaf")]
    pub tree_min_samples_leaf: usize,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub allow_drops: bool,
    #[serde(default = "d_max_depth")]
    pub max_depth: usize,
    #[serde(default)]
    pub partition_features: bool,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    #[serde(default = "d_llm_url")]
    pub llm_base_url: String,
    #[serde(default = "d_llm_model")]
    pub llm_model: String,
    #[serde(default = "d_llm_temperature")]
    pub llm_temperature: f64,
    #[serde(default = "d_llm_timeout")]
    pub llm_timeout_secs: u64,
    #[serde(default = "d_llm_retries")]
    pub llm_retries: usize,
}

/// Command-line values that replace config keys.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub agents: Option<usize>,
}

impl RunConfig {
    /// Parses TOML text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_owned()))?;
        if c.dataset.is_relative() {
            c.dataset = base.join(&c.dataset);
        }
        if c.output_dir.is_relative() {
            c.output_dir = base.join(&c.output_dir);
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = std::path::absolute(path.parent().unwrap_or(Path::new("")))?;
        Self::parse(&text, &base)
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.iterations {
            self.iterations = t;
        }
        if let Some(a) = o.agents {
            self.agents = a;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn label(&self) -> Result<Option<LabelColumn>, CliError> {
        match (&self.label_column, self.label_index) {
            (Some(_), Some(_)) => Err(CliError::Config("set label_column or label_index, not both".into())),
            (Some(n), None) => Ok(Some(LabelColumn::Name(n.clone()))),
            (None, Some(i)) => Ok(Some(LabelColumn::Index(i))),
            (None, None) => Ok(None),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        match self.model {
            ModelKind::Knn => ModelSpec::Knn { k: self.knn_k },
            ModelKind::DecisionTree => ModelSpec::DecisionTree {
                max_depth: self.tree_max_depth,
                min_samples_leaf: self.tree_min_samples_leaf,
            },
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            seed: self.seed,
            train_fraction: self.train_fraction,
            cv_folds: (self.cv_folds > 0).then_some(self.cv_folds),
            k_max: self.k_max,
            iterations: self.iterations,
            mcts_rounds: self.mcts_rounds,
            mcts_select: self.mcts_select,
            exploration: self.exploration,
            patience: self.patience,
            model: self.model_spec(),
            metric: self.metric,
            allow_drops: self.allow_drops,
            max_depth: self.max_depth,
            partition_features: self.partition_features,
        }
    }

    pub fn llm_settings(&self) -> LlmSettings {
        LlmSettings {
            base_url: self.llm_base_url.clone(),
            model: self.llm_model.clone(),
            temperature: self.llm_temperature,
            timeout_secs: self.llm_timeout_secs,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.label()?;
        if self.agents == 0 {
            return Err(CliError::Config("agents must be at least 1".into()));
        }
        if self.agent_kinds.len() > self.agents || self.agent_strategies.len() > self.agents {
            return Err(CliError::Config("more per-agent entries than agents".into()));
        }
        if !self.llm_temperature.is_finite() || self.llm_temperature < 0.0 {
            return Err(CliError::Config("llm_temperature must be a non-negative number".into()));
        }
        self.search_config().validate()?;
        for i in 0..self.agents {
            if self.kind_of(i) == AgentKind::Scripted {
                self.strategy_of(i).parse::<AgentStrategy>().map_err(CliError::Config)?;
            }
        }
        if !self.dataset.is_file() {
            return Err(DataError::FileNotFound(self.dataset.display().to_string()).into());
        }
        Ok(())
    }

    fn kind_of(&self, i: usize) -> AgentKind {
        self.agent_kinds.get(i).copied().unwrap_or(self.agent_kind)
    }

    fn strategy_of(&self, i: usize) -> String {
        self.agent_strategies
            .get(i)
            .cloned()
            .unwrap_or_else(|| AgentStrategy::DEFAULT_ROSTER[i % 3].tag().to_owned())
    }

    pub fn build_agents(&self) -> Result<Vec<Box<dyn Agent>>, CliError> {
        let settings = self.llm_settings();
        (0..self.agents)
            .map(|i| {
                let strategy = self.strategy_of(i);
                Ok(match self.kind_of(i) {
                    AgentKind::Scripted => {
                        let s = strategy.parse::<AgentStrategy>().map_err(CliError::Config)?;
                        Box::new(ScriptedAgent::new(s, self.seed)) as Box<dyn Agent>
                    }
                    AgentKind::Llm => {
                        let text = strategy
                            .parse::<AgentStrategy>()
                            .map(|s| s.description().to_owned())
                            .unwrap_or(strategy);
                        let transport = Box::new(HttpTransport::new(&settings));
                        Box::new(LlmAgent::new(transport, &settings, text).with_retries(self.llm_retries))
                    }
                })
            })
            .collect()
    }

    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        let label = match self.label()? {
            Some(l) => l,
            None => {
                let mut r = csv::Reader::from_path(&self.dataset)
                    .map_err(|e| DataError::FileNotFound(format!("{}: {e}", self.dataset.display())))?;
                let n = r
                    .headers()
                    .map_err(|e| CliError::Config(format!("cannot read header: {e}")))?
                    .len();
                LabelColumn::Index(n.saturating_sub(1))
            }
        };
        Ok(data::load_csv(&self.dataset, &label, self.drop_missing)?)
    }
}

/// Headline numbers of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub theta_0: EvalReport,
    pub theta_best: EvalReport,
    pub metric: Metric,
    pub improvement: f64,
    pub best_node: usize,
    pub mcts_choice: Option<usize>,
    pub features: Vec<String>,
}

impl Summary {
    pub fn of(r: &RunResult) -> Self {
        Summary {
            theta_0: r.tree.root().theta.clone(),
            theta_best: r.best_node().theta.clone(),
            metric: r.config.metric,
            improvement: r.improvement(),
            best_node: r.best,
            mcts_choice: r.mcts_choice,
            features: r.best_node().subset.names(),
        }
    }
}

fn fresh_dir(parent: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(parent)?;
    let stamp = chrono::Utc::now().format("run-%Y%m%dT%H%M%SZ").to_string();
    for n in 0.. {
        let name = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn write_best_csv(path: &Path, r: &RunResult, d: &Dataset) -> Result<(), CliError> {
    let cache = EvalCache::new();
    let best = r.best_node();
    let mut cols = Vec::new();
    let mut names = Vec::new();
    for e in best.subset.exprs() {
        if let Ok(v) = cache.evaluate(e, d) {
            names.push(e.name().to_owned());
            cols.push(v);
        }
    }
    let split = match r.config.cv_folds {
        Some(k) => data::kfold(d, k, r.config.seed)?
            .fold_assignments
            .iter()
            .map(|f| format!("fold{f}"))
            .collect::<Vec<_>>(),
        None => {
            let s = data::split(d, r.config.train_fraction, r.config.seed)?;
            let mut tags = vec![String::new(); d.n_samples()];
            for &i in &s.train_indices {
                tags[i] = "train".into();
            }
            for &i in &s.test_indices {
                tags[i] = "test".into();
            }
            tags
        }
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(e.to_string()))?;
    let io = |e: csv::Error| CliError::Io(e.to_string());
    let mut header = names.clone();
    header.extend(["label".to_owned(), "split".to_owned()]);
    w.write_record(&header).map_err(io)?;
    let class_names = d.class_names();
    for row in 0..d.n_samples() {
        let mut rec: Vec<String> = cols.iter().map(|c| c[row].to_string()).collect();
        rec.push(class_names[d.labels()[row]].clone());
        rec.push(split[row].clone());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs a search and writes a new run directory under `output_dir`.
pub fn cmd_run(config: &RunConfig) -> Result<(PathBuf, Summary), CliError> {
    config.validate()?;
    let dataset = Arc::new(config.load_dataset()?);
    let agents = config.build_agents()?;
    let result = search::run(&config.search_config(), dataset.clone(), &agents)?;

    let dir = fresh_dir(&config.output_dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
    fs::write(dir.join(LOG_FILE), result.log_string())?;
    write_best_csv(&dir.join(BEST_FILE), &result, &dataset)?;
    let summary = Summary::of(&result);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(dir.join(SUMMARY_FILE), json + "\n")?;
    Ok((dir, summary))
}

/// Node log of a finished run, as written by `run`.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub header: serde_json::Value,
    pub nodes: Vec<NodeRecord>,
    pub result: serde_json::Value,
}

impl RunLog {
    pub fn parse(text: &str) -> Option<RunLog> {
        let mut header = None;
        let mut result = None;
        let mut nodes = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line).ok()?;
            match v.get("record")?.as_str()? {
                "header" => header = Some(v),
                "node" => nodes.push(serde_json::from_value(v).ok()?),
                "result" => result = Some(v),
                _ => return None,
            }
        }
        Some(RunLog {
            header: header?,
            nodes,
            result: result?,
        })
    }

    pub fn load(dir: &Path) -> Result<RunLog, CliError> {
        let incomplete = || CliError::IncompleteRun(dir.display().to_string());
        if !dir.join(SUMMARY_FILE).is_file() {
            return Err(incomplete());
        }
        let text = fs::read_to_string(dir.join(LOG_FILE)).map_err(|_| incomplete())?;
        RunLog::parse(&text).ok_or_else(incomplete)
    }

    pub fn best(&self) -> usize {
        self.result["best"].as_u64().unwrap_or(0) as usize
    }

    fn ids(&self, key: &str) -> Vec<usize> {
        self.result[key]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect())
            .unwrap_or_default()
    }

    pub fn path(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes.get(cur).and_then(|n| n.parent) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Mean feature count over the agents' current chain heads after each
    /// generation layer.
    pub fn feature_counts(&self) -> Vec<f64> {
        let n_agents = self.header["agents"].as_array().map_or(0, Vec::len).max(1);
        let root = self.nodes.first().map_or(0, |n| n.features.len());
        let mut heads = vec![root; n_agents];
        let layers = self.nodes.iter().filter(|n| n.phase == Phase::Generate).map(|n| n.layer).max().unwrap_or(0);
        (1..=layers)
            .map(|t| {
                for n in self.nodes.iter().filter(|n| n.phase == Phase::Generate && n.layer == t) {
                    if let Some(a) = n.agent.filter(|&a| a < n_agents) {
                        heads[a] = n.features.len();
                    }
                }
                heads.iter().sum::<usize>() as f64 / n_agents as f64
            })
            .collect()
    }
}

fn row(out: &mut String, label: &str, node: usize, features: usize, m: &MetricSummary) {
    let _ = writeln!(
        out,
        "{label:<10} {node:>5} {features:>9} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
        m.accuracy, m.precision, m.recall, m.f1
    );
}

/// Per-layer best metrics, baseline and final rows, and the feature-count
/// series.
pub fn cmd_report(dir: &Path) -> Result<String, CliError> {
    let log = RunLog::load(dir)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "row", "node", "features", "accuracy", "precision", "recall", "f1"
    );
    let root = &log.nodes[0];
    row(&mut out, "raw", 0, root.features.len(), &root.metrics);
    for id in log.ids("layer_optima") {
        let n = &log.nodes[id];
        row(&mut out, &format!("layer {}", n.layer), id, n.features.len(), &n.metrics);
    }
    for (r, id) in log.ids("round_optima").into_iter().enumerate() {
        let n = &log.nodes[id];
        row(&mut out, &format!("round {}", r + 1), id, n.features.len(), &n.metrics);
    }
    let best = &log.nodes[log.best()];
    row(&mut out, "best", best.id, best.features.len(), &best.metrics);
    let _ = writeln!(out, "\nimprovement: {:+.4}", best.score - root.score);
    let counts: Vec<String> = log.feature_counts().iter().map(|c| format!("{c:.2}")).collect();
    let _ = writeln!(out, "features per layer: {}", counts.join(" "));
    Ok(out)
}

/// Lineage, producing agent, rationale and delta of one final feature.
pub fn cmd_explain(dir: &Path, feature: &str) -> Result<String, CliError> {
    let log = RunLog::load(dir)?;
    let unknown = || CliError::UnknownFeature(feature.to_owned());
    let e = expr::parse(feature).map_err(|_| unknown())?;
    let path = log.path(log.best());
    if !log.nodes[*path.last().expect("path is nonempty")].features.iter().any(|f| f == e.name()) {
        return Err(unknown());
    }
    let origin = path
        .iter()
        .map(|&id| &log.nodes[id])
        .find(|n| n.features.iter().any(|f| f == e.name()))
        .expect("best node holds the feature");
    let mut out = String::new();
    let _ = writeln!(out, "feature: {}", e.name());
    if e.is_base() || origin.parent.is_none() {
        let _ = writeln!(out, "lineage: (base)");
        let _ = writeln!(out, "agent: none");
        return Ok(out);
    }
    let _ = writeln!(out, "lineage:");
    for l in expr::lineage(&e) {
        let _ = writeln!(out, "  {l}");
    }
    let strategy = origin.strategy.as_deref().unwrap_or("unknown");
    match origin.agent {
        Some(a) => {
            let _ = writeln!(out, "agent: {a} ({strategy})");
        }
        None => {
            let _ = writeln!(out, "agent: none");
        }
    }
    let _ = writeln!(out, "node: {} (layer {})", origin.id, origin.layer);
    let _ = writeln!(out, "rationale: {}", origin.rationale);
    let _ = writeln!(out, "delta: {:+.4}", origin.delta);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let c = RunConfig::parse("dataset = \"d.csv\"\n", Path::new("/tmp/x")).unwrap();
        assert_eq!(c.dataset, Path::new("/tmp/x/d.csv"));
        assert_eq!(c.train_fraction, 0.55);
        assert_eq!((c.agents, c.k_max, c.iterations, c.mcts_rounds, c.mcts_select), (3, 3, 10, 5, 2));
        assert_eq!(c.exploration, 1.4142);
        assert_eq!(c.patience, 3);
        assert_eq!(c.model_spec(), ModelSpec::Knn { k: 5 });
        assert_eq!(c.metric, Metric::Accuracy);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("dataset = \"d.csv\"\nagnets = 3\n", Path::new(".")).unwrap_err();
        assert_eq!(err.kind(), "InvalidConfig");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::parse("dataset = \"/d.csv\"\nmetric = \"f1\"\nagent_strategies = [\"balanced\"]\n", Path::new("/")).unwrap();
        c.apply(Overrides {
            seed: Some(4),
            iterations: Some(2),
            agents: None,
        });
        let back = RunConfig::parse(&c.to_toml(), Path::new("/elsewhere")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_agent_roster() {
        let mut c = RunConfig::parse("dataset = \"d.csv\"\n", Path::new(".")).unwrap();
        c.apply(Overrides {
            agents: Some(4),
            ..Overrides::default()
        });
        let tags: Vec<String> = c.build_agents().unwrap().iter().map(|a| a.strategy()).collect();
        assert_eq!(tags, ["nonlinear-unary", "interaction-binary", "balanced", "nonlinear-unary"]);
        c.agent_strategies = vec!["greedy".into()];
        assert_eq!(c.build_agents().err().map(|e| e.kind()), Some("InvalidConfig"));
    }
}
