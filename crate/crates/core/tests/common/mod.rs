//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use featgen::agents::{Agent, AgentStrategy, ScriptedAgent};
use featgen::data::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn named(cols: Vec<Vec<f64>>) -> Vec<(String, Vec<f64>)> {
    cols.into_iter().enumerate().map(|(i, c)| (format!("f{}", i + 1), c)).collect()
}

/// Label is the sign of `f1 * f2`, flipped for 10% of rows; `f3..f6` are
/// noise.
pub fn planted_interaction(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols = vec![Vec::with_capacity(n); 6];
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = row[0] * row[1] > 0.0;
        if rng.gen_bool(0.1) {
            y = !y;
        }
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
        labels.push(usize::from(y));
    }
    Dataset::new(named(cols), labels).unwrap()
}

/// Three classes driven by a nonlinear score of five positive columns.
pub fn three_class(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols = vec![Vec::with_capacity(n); 5];
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..3.0)).collect();
        scores.push(row[0] * row[1] - row[2].ln() + 0.3 * rng.gen_range(-1.0..1.0));
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let (a, b) = (sorted[n / 3], sorted[2 * n / 3]);
    let labels = scores.iter().map(|&s| usize::from(s >= a) + usize::from(s >= b)).collect();
    Dataset::new(named(cols), labels).unwrap()
}

pub fn roster(seed: u64) -> Vec<Box<dyn Agent>> {
    AgentStrategy::DEFAULT_ROSTER
        .into_iter()
        .map(|s| Box::new(ScriptedAgent::new(s, seed)) as Box<dyn Agent>)
        .collect()
}

pub fn single(strategy: AgentStrategy, seed: u64) -> Vec<Box<dyn Agent>> {
    vec![Box::new(ScriptedAgent::new(strategy, seed))]
}

/// Location of the UCI Abalone file: `$ABALONE_CSV`, else
/// `tests/data/abalone.data`.
pub fn abalone_path() -> PathBuf {
    std::env::var_os("ABALONE_CSV")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/abalone.data"))
}

/// Loads the raw UCI file (no header; sex, seven measurements, rings) as a
/// three-class problem: rings 1-8, 9-10 and 11 or more. Sex is coded
/// M = 0, F = 1, I = 2.
pub fn abalone() -> Result<Arc<Dataset>, String> {
    let path = abalone_path();
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let names = [
        "sex",
        "length",
        "diameter",
        "height",
        "whole_weight",
        "shucked_weight",
        "viscera_weight",
        "shell_weight",
    ];
    let mut cols = vec![Vec::new(); 8];
    let mut labels = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 9 {
            return Err(format!("line {}: expected 9 fields", i + 1));
        }
        cols[0].push(match cells[0] {
            "M" => 0.0,
            "F" => 1.0,
            "I" => 2.0,
            s => return Err(format!("line {}: sex {s:?}", i + 1)),
        });
        for j in 1..8 {
            cols[j].push(cells[j].parse().map_err(|_| format!("line {}: field {j}", i + 1))?);
        }
        let rings: u32 = cells[8].parse().map_err(|_| format!("line {}: rings", i + 1))?;
        labels.push(match rings {
            0..=8 => 0,
            9..=10 => 1,
            _ => 2,
        });
    }
    let columns = names.iter().map(|s| s.to_string()).zip(cols).collect();
    Dataset::new(columns, labels).map(Arc::new).map_err(|e| e.to_string())
}
