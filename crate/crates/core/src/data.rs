//! Tabular datasets: CSV loading, stratified splits and folds, z-scoring.
//!
//! A [`Dataset`] is immutable once built. Splits and folds are plain index
//! sets that refer back into it.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Datasets with fewer rows than this after cleaning are rejected.
pub const MIN_ROWS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("parse error at row {row}, column {column}: {reason}")]
    ParseError {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("label column missing: {0}")]
    LabelColumnMissing(String),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("invalid column name {0:?}")]
    InvalidColumnName(String),
    #[error("column {name} has {got} values, expected {expected}")]
    LengthMismatch {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("stratification impossible: class {class} has {count} member(s)")]
    StratificationImpossible { class: usize, count: usize },
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("k = {k} folds is larger than {n} samples")]
    KTooLarge { k: usize, n: usize },
    #[error("k = {0} folds; at least 2 required")]
    KTooSmall(usize),
}

impl DataError {
    /// Stable variant tag used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            DataError::FileNotFound(_) => "FileNotFound",
            DataError::ParseError { .. } => "ParseError",
            DataError::LabelColumnMissing(_) => "LabelColumnMissing",
            DataError::DegenerateDataset(_) => "DegenerateDataset",
            DataError::InvalidColumnName(_) => "InvalidColumnName",
            DataError::LengthMismatch { .. } => "LengthMismatch",
            DataError::LabelOutOfRange { .. } => "LabelOutOfRange",
            DataError::StratificationImpossible { .. } => "StratificationImpossible",
            DataError::InvalidFraction(_) => "InvalidFraction",
            DataError::KTooLarge { .. } => "KTooLarge",
            DataError::KTooSmall(_) => "KTooSmall",
        }
    }
}

/// How the label column is picked out of a CSV header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

/// A named numeric feature column.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Arc<[f64]>,
}

/// Immutable table of numeric features plus dense integer class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    id: u64,
    columns: Vec<Column>,
    labels: Arc<[usize]>,
    n_classes: usize,
    class_names: Vec<String>,
    dropped_rows: usize,
}

/// Column names appear verbatim inside canonical expression names, so they
/// may not contain whitespace or the grammar's punctuation.
pub fn is_valid_column_name(name: &str) -> bool {
    !name.is_empty()
        && !name
            .chars()
            .any(|c| c.is_whitespace() || c == '(' || c == ')' || c == ',')
}

impl Dataset {
    /// Builds a dataset from already-parsed columns and labels.
    ///
    /// `n_classes` is taken as `max(label) + 1`. Class names default to the
    /// decimal label ids.
    pub fn new(columns: Vec<(String, Vec<f64>)>, labels: Vec<usize>) -> Result<Self, DataError> {
        let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        let names = (0..n_classes).map(|c| c.to_string()).collect();
        Self::with_class_names(columns, labels, names, 0)
    }

    pub fn with_class_names(
        columns: Vec<(String, Vec<f64>)>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        dropped_rows: usize,
    ) -> Result<Self, DataError> {
        let n = labels.len();
        let n_classes = class_names.len();
        let mut seen = HashSet::new();
        for (name, values) in &columns {
            if !is_valid_column_name(name) || !seen.insert(name.as_str()) {
                return Err(DataError::InvalidColumnName(name.clone()));
            }
            if values.len() != n {
                return Err(DataError::LengthMismatch {
                    name: name.clone(),
                    got: values.len(),
                    expected: n,
                });
            }
            if let Some(row) = values.iter().position(|v| !v.is_finite()) {
                return Err(DataError::ParseError {
                    row,
                    column: name.clone(),
                    reason: "non-finite value".into(),
                });
            }
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DataError::LabelOutOfRange { label, n_classes });
        }
        if n < MIN_ROWS {
            return Err(DataError::DegenerateDataset(format!(
                "{n} rows, at least {MIN_ROWS} required"
            )));
        }
        let present = labels.iter().collect::<HashSet<_>>().len();
        if present < 2 {
            return Err(DataError::DegenerateDataset(format!(
                "{present} distinct class(es), at least 2 required"
            )));
        }

        let mut hasher = DefaultHasher::new();
        for (name, values) in &columns {
            name.hash(&mut hasher);
            for v in values {
                v.to_bits().hash(&mut hasher);
            }
        }
        labels.hash(&mut hasher);

        Ok(Dataset {
            id: hasher.finish(),
            columns: columns
                .into_iter()
                .map(|(name, values)| Column {
                    name,
                    values: values.into(),
                })
                .collect(),
            labels: labels.into(),
            n_classes,
            class_names,
            dropped_rows,
        })
    }

    /// Content hash; identifies the dataset in evaluation caches.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Rows removed during loading because of empty cells.
    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    /// Per-class row counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in self.labels.iter() {
            counts[l] += 1;
        }
        counts
    }
}

/// Loads a CSV file with a header row.
///
/// Every non-label cell must parse as a finite number or be empty. Empty
/// cells either drop the whole row (`drop_missing`) or fail the load. Label
/// values are arbitrary text, mapped to dense ids in first-appearance order.
pub fn load_csv(
    path: impl AsRef<Path>,
    label: &LabelColumn,
    drop_missing: bool,
) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(DataError::FileNotFound(path.display().to_string()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::FileNotFound(format!("{}: {e}", path.display())))?;

    let header_err = |e: csv::Error| DataError::ParseError {
        row: 0,
        column: String::new(),
        reason: e.to_string(),
    };
    let headers: Vec<String> = reader
        .headers()
        .map_err(header_err)?
        .iter()
        .map(str::to_owned)
        .collect();
    let label_idx = match label {
        LabelColumn::Name(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::LabelColumnMissing(name.clone()))?,
        LabelColumn::Index(i) if *i < headers.len() => *i,
        LabelColumn::Index(i) => return Err(DataError::LabelColumnMissing(format!("index {i}"))),
    };
    let feature_idx: Vec<usize> = (0..headers.len()).filter(|&i| i != label_idx).collect();
    for &i in &feature_idx {
        if !is_valid_column_name(&headers[i]) {
            return Err(DataError::InvalidColumnName(headers[i].clone()));
        }
    }

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); feature_idx.len()];
    let mut labels = Vec::new();
    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut class_names = Vec::new();
    let mut dropped = 0;

    'rows: for (r, record) in reader.records().enumerate() {
        // 1-based data row; the header is row 0.
        let row = r + 1;
        let record = record.map_err(|e| DataError::ParseError {
            row,
            column: String::new(),
            reason: e.to_string(),
        })?;
        let label_cell = record.get(label_idx).unwrap_or("");
        let mut parsed = Vec::with_capacity(feature_idx.len());
        let mut missing = label_cell.is_empty();
        if missing && !drop_missing {
            return Err(DataError::ParseError {
                row,
                column: headers[label_idx].clone(),
                reason: "empty cell".into(),
            });
        }
        for &i in &feature_idx {
            let cell = record.get(i).unwrap_or("");
            if cell.is_empty() {
                if !drop_missing {
                    return Err(DataError::ParseError {
                        row,
                        column: headers[i].clone(),
                        reason: "empty cell".into(),
                    });
                }
                missing = true;
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => parsed.push(v),
                _ => {
                    return Err(DataError::ParseError {
                        row,
                        column: headers[i].clone(),
                        reason: format!("not a finite number: {cell:?}"),
                    })
                }
            }
        }
        if missing {
            dropped += 1;
            continue 'rows;
        }
        for (col, v) in values.iter_mut().zip(parsed) {
            col.push(v);
        }
        let next = class_ids.len();
        let id = *class_ids.entry(label_cell.to_owned()).or_insert_with(|| {
            class_names.push(label_cell.to_owned());
            next
        });
        labels.push(id);
    }

    let columns = feature_idx
        .iter()
        .map(|&i| headers[i].clone())
        .zip(values)
        .collect();
    Dataset::with_class_names(columns, labels, class_names, dropped)
}

/// A train/test partition of row indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
    pub train_fraction: f64,
}

/// Per-row fold assignment for k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub fold_assignments: Vec<usize>,
}

impl FoldSpec {
    /// Train/test partition where `fold` is held out.
    pub fn split_for(&self, fold: usize) -> SplitSpec {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..self.fold_assignments.len())
            .partition(|&i| self.fold_assignments[i] == fold);
        SplitSpec {
            train_indices: train,
            test_indices: test,
            seed: 0,
            train_fraction: 1.0 - 1.0 / self.k as f64,
        }
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

fn shuffled_class_members(d: &Dataset, seed: u64) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); d.n_classes()];
    for (i, &l) in d.labels().iter().enumerate() {
        members[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    members
}

/// Stratified random train/test split.
///
/// `|train| = round(train_fraction * n)`. Each class contributes either the
/// floor or the ceiling of its proportional share; leftover rows go to the
/// classes with the largest fractional remainders (lower class id first).
pub fn split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitSpec, DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidFraction(train_fraction));
    }
    let counts = d.class_counts();
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c == 1) {
        return Err(DataError::StratificationImpossible { class, count });
    }
    let n = d.n_samples();
    let target = (train_fraction * n as f64).round() as usize;

    let ideal: Vec<f64> = counts.iter().map(|&c| train_fraction * c as f64).collect();
    let mut quota: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut remaining = target.saturating_sub(quota.iter().sum());
    let mut order: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in &order {
        if remaining == 0 {
            break;
        }
        if quota[c] < counts[c] {
            quota[c] += 1;
            remaining -= 1;
        }
    }

    let members = shuffled_class_members(d, seed);
    let mut train = Vec::with_capacity(target);
    let mut test = Vec::with_capacity(n - target);
    for (c, m) in members.iter().enumerate() {
        train.extend_from_slice(&m[..quota[c]]);
        test.extend_from_slice(&m[quota[c]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitSpec {
        train_indices: train,
        test_indices: test,
        seed,
        train_fraction,
    })
}

/// Stratified k-fold assignment.
///
/// Rows are shuffled within each class, the classes are concatenated, and
/// fold ids are dealt round-robin, so fold sizes differ by at most one and
/// each class is spread evenly.
pub fn kfold(d: &Dataset, k: usize, seed: u64) -> Result<FoldSpec, DataError> {
    if k < 2 {
        return Err(DataError::KTooSmall(k));
    }
    let n = d.n_samples();
    if k > n {
        return Err(DataError::KTooLarge { k, n });
    }
    let mut fold_assignments = vec![0; n];
    let members = shuffled_class_members(d, seed);
    for (pos, &row) in members.iter().flatten().enumerate() {
        fold_assignments[row] = pos % k;
    }
    Ok(FoldSpec {
        k,
        fold_assignments,
    })
}

/// Z-scores a sequence with the population standard deviation. Constant
/// input maps to all zeros.
///
/// # Panics
///
/// Panics on empty input.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    assert!(!values.is_empty(), "standardize requires a nonempty sequence");
    let scaler = Standardizer::fit(values);
    values.iter().map(|&v| scaler.apply(v)).collect()
}

/// Mean and population standard deviation of one column, fit once and
/// applied to other rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Standardizer {
            mean,
            std: var.sqrt(),
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        // Relative cutoff: a constant column can leave rounding residue in var.
        if self.std <= 1e-12 * self.mean.abs().max(1.0) {
            0.0
        } else {
            (v - self.mean) / self.std
        }
    }
}
