//! Downstream evaluation: materialize a feature subset, fit a classifier,
//! score its test predictions.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, FoldSpec, SplitSpec, Standardizer};
use crate::expr::{EvalCache, ExprError, FeatureSubset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no evaluable feature columns remain")]
    EmptyFeatureMatrix,
    #[error("training rows contain a single class")]
    DegenerateTraining,
    #[error("empty train or test set")]
    EmptySplit,
    #[error("length mismatch: {predictions} predictions vs {truth} labels")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("invalid model spec: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

impl EvalError {
    pub fn kind(&self) -> &'static str {
        match self {
            EvalError::EmptyFeatureMatrix => "EmptyFeatureMatrix",
            EvalError::DegenerateTraining => "DegenerateTraining",
            EvalError::EmptySplit => "EmptySplit",
            EvalError::LengthMismatch { .. } => "LengthMismatch",
            EvalError::InvalidModel(_) => "InvalidModel",
            EvalError::Expr(ExprError::UnknownColumn(_)) => "UnknownColumn",
            EvalError::Expr(_) => "DomainViolation",
        }
    }
}

/// Downstream classifier and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Majority vote of the `k` nearest training rows, euclidean distance on
    /// train-standardized columns.
    Knn { k: usize },
    /// Greedy CART with gini impurity.
    DecisionTree {
        max_depth: usize,
        min_samples_leaf: usize,
    },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Knn { k: 5 }
    }
}

impl ModelSpec {
    pub fn default_tree() -> Self {
        ModelSpec::DecisionTree {
            max_depth: 8,
            min_samples_leaf: 5,
        }
    }

    pub fn tag(&self) -> String {
        match self {
            ModelSpec::Knn { k } => format!("knn(k={k})"),
            ModelSpec::DecisionTree {
                max_depth,
                min_samples_leaf,
            } => format!("dt(depth={max_depth},leaf={min_samples_leaf})"),
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        match *self {
            ModelSpec::Knn { k: 0 } => Err(EvalError::InvalidModel("knn k must be >= 1".into())),
            ModelSpec::DecisionTree { max_depth: 0, .. } => {
                Err(EvalError::InvalidModel("tree depth must be >= 1".into()))
            }
            ModelSpec::DecisionTree {
                min_samples_leaf: 0,
                ..
            } => Err(EvalError::InvalidModel("min samples per leaf must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    /// Gathers `row_idx` rows from a set of equal-length columns.
    pub fn from_columns(columns: &[Arc<[f64]>], row_idx: &[usize]) -> Self {
        let cols = columns.len();
        let mut data = Vec::with_capacity(row_idx.len() * cols);
        for &r in row_idx {
            data.extend(columns.iter().map(|c| c[r]));
        }
        Matrix {
            rows: row_idx.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
}

/// A subset turned into train/test matrices.
#[derive(Debug, Clone)]
pub struct Materialized {
    pub train: Matrix,
    pub test: Matrix,
    pub train_labels: Vec<usize>,
    pub test_labels: Vec<usize>,
    /// Canonical names of the columns actually present, in order.
    pub columns: Vec<String>,
    /// Expressions excluded because they failed to evaluate.
    pub excluded: Vec<(String, String)>,
}

/// Evaluated columns of a subset over all rows. Expressions that fail to
/// evaluate are reported in the second element instead.
pub fn evaluate_columns(
    subset: &FeatureSubset,
    d: &Dataset,
    cache: &EvalCache,
) -> (Vec<(String, Arc<[f64]>)>, Vec<(String, String)>) {
    let mut ok = Vec::new();
    let mut excluded = Vec::new();
    for e in subset.exprs() {
        match cache.evaluate(e, d) {
            Ok(values) => ok.push((e.name().to_owned(), values)),
            Err(err) => excluded.push((e.name().to_owned(), err.to_string())),
        }
    }
    (ok, excluded)
}

pub fn materialize(
    subset: &FeatureSubset,
    d: &Dataset,
    split: &SplitSpec,
) -> Result<Materialized, EvalError> {
    materialize_cached(subset, d, split, &EvalCache::new())
}

pub fn materialize_cached(
    subset: &FeatureSubset,
    d: &Dataset,
    split: &SplitSpec,
    cache: &EvalCache,
) -> Result<Materialized, EvalError> {
    let (ok, excluded) = evaluate_columns(subset, d, cache);
    if ok.is_empty() {
        return Err(EvalError::EmptyFeatureMatrix);
    }
    let (columns, values): (Vec<String>, Vec<Arc<[f64]>>) = ok.into_iter().unzip();
    let labels = d.labels();
    Ok(Materialized {
        train: Matrix::from_columns(&values, &split.train_indices),
        test: Matrix::from_columns(&values, &split.test_indices),
        train_labels: split.train_indices.iter().map(|&i| labels[i]).collect(),
        test_labels: split.test_indices.iter().map(|&i| labels[i]).collect(),
        columns,
        excluded,
    })
}

/// Fits `model` on the training rows and predicts the test rows.
pub fn fit_predict(
    model: &ModelSpec,
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
) -> Result<Vec<usize>, EvalError> {
    model.validate()?;
    if train.rows() == 0 || test.rows() == 0 {
        return Err(EvalError::EmptySplit);
    }
    if train_labels.len() != train.rows() {
        return Err(EvalError::LengthMismatch {
            predictions: train.rows(),
            truth: train_labels.len(),
        });
    }
    if train_labels.iter().all(|&l| l == train_labels[0]) {
        return Err(EvalError::DegenerateTraining);
    }
    let n_classes = train_labels.iter().max().map_or(0, |m| m + 1);
    Ok(match *model {
        ModelSpec::Knn { k } => knn_predict(k, train, train_labels, test, n_classes),
        ModelSpec::DecisionTree {
            max_depth,
            min_samples_leaf,
        } => {
            let tree = TreeNode::grow(train, train_labels, n_classes, max_depth, min_samples_leaf);
            (0..test.rows()).map(|i| tree.predict(test.row(i))).collect()
        }
    })
}

/// Index of the largest count; ties go to the smallest class id.
fn argmax_count(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

fn knn_predict(
    k: usize,
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
    n_classes: usize,
) -> Vec<usize> {
    let scalers: Vec<Standardizer> = (0..train.cols())
        .map(|j| Standardizer::fit(&train.column(j)))
        .collect();
    let scale = |m: &Matrix| -> Vec<f64> {
        (0..m.rows())
            .flat_map(|i| m.row(i).iter().zip(&scalers).map(|(&v, s)| s.apply(v)))
            .collect()
    };
    let dims = train.cols();
    let train_z = scale(train);
    let test_z = scale(test);
    let k = k.min(train.rows());

    // Distance ties resolve to the lower training index.
    let by_distance = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    };
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train.rows());
    let mut votes = vec![0usize; n_classes];
    (0..test.rows())
        .map(|i| {
            let q = &test_z[i * dims..(i + 1) * dims];
            dist.clear();
            dist.extend(train_z.chunks_exact(dims.max(1)).take(train.rows()).enumerate().map(
                |(t, row)| {
                    let d2: f64 = row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d2, t)
                },
            ));
            if k < dist.len() {
                dist.select_nth_unstable_by(k - 1, by_distance);
            }
            votes.iter_mut().for_each(|v| *v = 0);
            for &(_, t) in &dist[..k] {
                votes[train_labels[t]] += 1;
            }
            argmax_count(&votes)
        })
        .collect()
}

#[derive(Debug)]
enum TreeNode {
    Leaf(usize),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

impl TreeNode {
    fn grow(
        x: &Matrix,
        y: &[usize],
        n_classes: usize,
        max_depth: usize,
        min_leaf: usize,
    ) -> TreeNode {
        let rows: Vec<usize> = (0..x.rows()).collect();
        Self::grow_rows(x, y, n_classes, &rows, max_depth, min_leaf)
    }

    fn grow_rows(
        x: &Matrix,
        y: &[usize],
        n_classes: usize,
        rows: &[usize],
        depth_left: usize,
        min_leaf: usize,
    ) -> TreeNode {
        let mut counts = vec![0; n_classes];
        for &r in rows {
            counts[y[r]] += 1;
        }
        let majority = argmax_count(&counts);
        let parent_impurity = gini(&counts, rows.len());
        if depth_left == 0 || parent_impurity == 0.0 || rows.len() < 2 * min_leaf {
            return TreeNode::Leaf(majority);
        }

        // (weighted impurity, feature, threshold); strict improvement keeps
        // the first candidate in scan order on ties.
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted: Vec<usize> = rows.to_vec();
        let n = rows.len();
        for feature in 0..x.cols() {
            sorted.sort_by(|&a, &b| x.get(a, feature).total_cmp(&x.get(b, feature)).then(a.cmp(&b)));
            let mut left = vec![0usize; n_classes];
            let mut right = counts.clone();
            for pos in 0..n - 1 {
                let r = sorted[pos];
                left[y[r]] += 1;
                right[y[r]] -= 1;
                let n_left = pos + 1;
                let (v, next) = (x.get(r, feature), x.get(sorted[pos + 1], feature));
                if v == next || n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                let weighted = (n_left as f64 * gini(&left, n_left)
                    + (n - n_left) as f64 * gini(&right, n - n_left))
                    / n as f64;
                if best.map_or(true, |(b, _, _)| weighted < b) {
                    best = Some((weighted, feature, v + (next - v) / 2.0));
                }
            }
        }
        match best {
            Some((impurity, feature, threshold)) if impurity < parent_impurity => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| x.get(i, feature) <= threshold);
                TreeNode::Split {
                    feature,
                    threshold,
                    left: Box::new(Self::grow_rows(x, y, n_classes, &l, depth_left - 1, min_leaf)),
                    right: Box::new(Self::grow_rows(x, y, n_classes, &r, depth_left - 1, min_leaf)),
                }
            }
            _ => TreeNode::Leaf(majority),
        }
    }

    fn predict(&self, row: &[f64]) -> usize {
        match self {
            TreeNode::Leaf(c) => *c,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if row[*feature] <= *threshold {
                    left.predict(row)
                } else {
                    right.predict(row)
                }
            }
        }
    }
}

/// Classification quality of one set of predictions.
///
/// `precision`, `recall` and `f1` are macro values. For a single evaluation
/// `f1` is the harmonic mean of macro precision and macro recall; for a
/// k-fold mean report every field is the arithmetic mean over `folds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub model: String,
    pub split: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<EvalReport>,
}

/// Search-driving metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Accuracy,
    F1,
}

impl Metric {
    pub fn of(self, r: &EvalReport) -> f64 {
        match self {
            Metric::Accuracy => r.accuracy,
            Metric::F1 => r.f1,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "f1" => Ok(Metric::F1),
            other => Err(format!("unknown metric {other:?} (expected accuracy or f1)")),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy plus macro precision, recall and F1.
///
/// Zero denominators yield 0 rather than NaN.
pub fn metrics(
    predictions: &[usize],
    truth: &[usize],
    n_classes: usize,
) -> Result<EvalReport, EvalError> {
    if predictions.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truth: truth.len(),
        });
    }
    let n_classes = predictions
        .iter()
        .chain(truth)
        .map(|&c| c + 1)
        .max()
        .unwrap_or(0)
        .max(n_classes);
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut actual = vec![0usize; n_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        predicted[p] += 1;
        actual[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let per_class_precision: Vec<f64> = (0..n_classes).map(|c| ratio(tp[c], predicted[c])).collect();
    let per_class_recall: Vec<f64> = (0..n_classes).map(|c| ratio(tp[c], actual[c])).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let precision = mean(&per_class_precision);
    let recall = mean(&per_class_recall);
    let f1 = if precision > 0.0 && recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EvalReport {
        accuracy: ratio(tp.iter().sum(), truth.len()),
        precision,
        recall,
        f1,
        per_class_precision,
        per_class_recall,
        model: String::new(),
        split: String::new(),
        folds: Vec::new(),
    })
}

/// Field-wise mean of fold reports, with the folds attached.
pub fn mean_report(folds: Vec<EvalReport>) -> EvalReport {
    let n = folds.len() as f64;
    let avg = |f: &dyn Fn(&EvalReport) -> f64| folds.iter().map(f).sum::<f64>() / n;
    let width = folds.iter().map(|r| r.per_class_precision.len()).max().unwrap_or(0);
    let avg_vec = |f: &dyn Fn(&EvalReport) -> &Vec<f64>| -> Vec<f64> {
        (0..width)
            .map(|c| folds.iter().map(|r| f(r).get(c).copied().unwrap_or(0.0)).sum::<f64>() / n)
            .collect()
    };
    EvalReport {
        accuracy: avg(&|r| r.accuracy),
        precision: avg(&|r| r.precision),
        recall: avg(&|r| r.recall),
        f1: avg(&|r| r.f1),
        per_class_precision: avg_vec(&|r| &r.per_class_precision),
        per_class_recall: avg_vec(&|r| &r.per_class_recall),
        model: folds.first().map(|r| r.model.clone()).unwrap_or_default(),
        split: format!("{}-fold mean", folds.len()),
        folds,
    }
}

/// How test metrics are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Holdout(SplitSpec),
    KFold(FoldSpec),
}

/// Evaluates `subset` under `protocol`: the test-split report for a holdout,
/// the mean over folds (folds attached) for k-fold.
pub fn evaluate_subset(
    subset: &FeatureSubset,
    d: &Dataset,
    protocol: &Protocol,
    model: &ModelSpec,
) -> Result<EvalReport, EvalError> {
    Evaluator::new(Arc::new(d.clone()), protocol.clone(), *model)
        .evaluate(subset)
        .map(|o| o.report)
}

/// Result of one subset evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: EvalReport,
    /// Expressions dropped from the matrix, with the reason.
    pub excluded: Vec<(String, String)>,
}

/// Evaluates subsets of one dataset under a fixed protocol and model,
/// memoizing generated columns.
#[derive(Debug)]
pub struct Evaluator {
    dataset: Arc<Dataset>,
    protocol: Protocol,
    model: ModelSpec,
    cache: Arc<EvalCache>,
}

impl Evaluator {
    pub fn new(dataset: Arc<Dataset>, protocol: Protocol, model: ModelSpec) -> Self {
        Evaluator {
            dataset,
            protocol,
            model,
            cache: Arc::new(EvalCache::new()),
        }
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn protocol(&self) -> &Protocol {
        &self.protocol
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn cache(&self) -> &Arc<EvalCache> {
        &self.cache
    }

    /// Rows the agents may inspect: the training split for a holdout, every
    /// row for k-fold.
    pub fn training_rows(&self) -> Vec<usize> {
        match &self.protocol {
            Protocol::Holdout(s) => s.train_indices.clone(),
            Protocol::KFold(f) => (0..f.fold_assignments.len()).collect(),
        }
    }

    fn evaluate_split(&self, subset: &FeatureSubset, split: &SplitSpec, tag: String) -> Result<Outcome, EvalError> {
        let m = materialize_cached(subset, &self.dataset, split, &self.cache)?;
        let preds = fit_predict(&self.model, &m.train, &m.train_labels, &m.test)?;
        let mut report = metrics(&preds, &m.test_labels, self.dataset.n_classes())?;
        report.model = self.model.tag();
        report.split = tag;
        Ok(Outcome {
            report,
            excluded: m.excluded,
        })
    }

    pub fn evaluate(&self, subset: &FeatureSubset) -> Result<Outcome, EvalError> {
        match &self.protocol {
            Protocol::Holdout(split) => {
                let tag = format!("holdout(train={:.2},seed={})", split.train_fraction, split.seed);
                self.evaluate_split(subset, split, tag)
            }
            Protocol::KFold(folds) => {
                let mut reports = Vec::with_capacity(folds.k);
                let mut excluded = Vec::new();
                for f in 0..folds.k {
                    let o = self.evaluate_split(subset, &folds.split_for(f), format!("fold {f}"))?;
                    excluded = o.excluded;
                    reports.push(o.report);
                }
                Ok(Outcome {
                    report: mean_report(reports),
                    excluded,
                })
            }
        }
    }
}
