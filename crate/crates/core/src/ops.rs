//! The closed operation set and its numeric-domain guards.
//!
//! Every application either returns a fully finite column or rejects the
//! input with [`OpsError::DomainViolation`]; inputs are never patched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest magnitude accepted as a divisor (also used for `tan` poles).
pub const EPS_DIV: f64 = 1e-12;
/// Largest argument accepted by `exp` before double-precision overflow.
pub const EXP_MAX: f64 = 700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpsError {
    #[error("unknown operation {0:?}")]
    UnknownOperation(String),
    #[error("{op} rejected {bad} of {total} inputs")]
    DomainViolation {
        op: Operation,
        bad: usize,
        total: usize,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{op} takes {expected} operand(s)")]
    ArityMismatch { op: Operation, expected: usize },
}

impl OpsError {
    /// Fraction of rejected elements for a domain violation, else 0.
    pub fn fraction_bad(&self) -> f64 {
        match self {
            OpsError::DomainViolation { bad, total, .. } if *total > 0 => {
                *bad as f64 / *total as f64
            }
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operation {
    Sqrt,
    Square,
    Cos,
    Sin,
    Tan,
    Exp,
    Cube,
    Log,
    Reciprocal,
    Sigmoid,
    Plus,
    Subtract,
    Multiply,
    Divide,
}

impl Operation {
    /// The full registry in canonical order: ten unary then four binary.
    pub const ALL: [Operation; 14] = [
        Operation::Sqrt,
        Operation::Square,
        Operation::Cos,
        Operation::Sin,
        Operation::Tan,
        Operation::Exp,
        Operation::Cube,
        Operation::Log,
        Operation::Reciprocal,
        Operation::Sigmoid,
        Operation::Plus,
        Operation::Subtract,
        Operation::Multiply,
        Operation::Divide,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operation::Sqrt => "sqrt",
            Operation::Square => "square",
            Operation::Cos => "cos",
            Operation::Sin => "sin",
            Operation::Tan => "tan",
            Operation::Exp => "exp",
            Operation::Cube => "cube",
            Operation::Log => "log",
            Operation::Reciprocal => "reciprocal",
            Operation::Sigmoid => "sigmoid",
            Operation::Plus => "plus",
            Operation::Subtract => "subtract",
            Operation::Multiply => "multiply",
            Operation::Divide => "divide",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Operation::Plus | Operation::Subtract | Operation::Multiply | Operation::Divide => 2,
            _ => 1,
        }
    }

    pub fn is_unary(self) -> bool {
        self.arity() == 1
    }

    pub fn is_binary(self) -> bool {
        self.arity() == 2
    }

    /// Operand order does not matter for these.
    pub fn is_commutative(self) -> bool {
        matches!(self, Operation::Plus | Operation::Multiply)
    }

    pub fn unary() -> impl Iterator<Item = Operation> {
        Self::ALL.into_iter().filter(|o| o.is_unary())
    }

    pub fn binary() -> impl Iterator<Item = Operation> {
        Self::ALL.into_iter().filter(|o| o.is_binary())
    }

    fn unary_guard(self, x: f64) -> bool {
        match self {
            Operation::Sqrt => x >= 0.0,
            Operation::Log => x > 0.0,
            Operation::Reciprocal => x.abs() >= EPS_DIV,
            Operation::Exp => x <= EXP_MAX,
            Operation::Tan => x.cos().abs() >= EPS_DIV,
            _ => true,
        }
    }

    fn unary_value(self, x: f64) -> f64 {
        match self {
            Operation::Sqrt => x.sqrt(),
            Operation::Square => x * x,
            Operation::Cos => x.cos(),
            Operation::Sin => x.sin(),
            Operation::Tan => x.tan(),
            Operation::Exp => x.exp(),
            Operation::Cube => x * x * x,
            Operation::Log => x.ln(),
            Operation::Reciprocal => 1.0 / x,
            Operation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            _ => unreachable!("{self} is binary"),
        }
    }

    fn binary_value(self, x: f64, y: f64) -> Option<f64> {
        match self {
            Operation::Plus => Some(x + y),
            Operation::Subtract => Some(x - y),
            Operation::Multiply => Some(x * y),
            Operation::Divide => (y.abs() >= EPS_DIV).then(|| x / y),
            _ => unreachable!("{self} is unary"),
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operation {
    type Err = OpsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        lookup(s)
    }
}

/// Resolves an operation by its canonical token.
pub fn lookup(name: &str) -> Result<Operation, OpsError> {
    Operation::ALL
        .into_iter()
        .find(|o| o.name() == name)
        .ok_or_else(|| OpsError::UnknownOperation(name.to_owned()))
}

fn finish(op: Operation, out: Vec<Option<f64>>) -> Result<Vec<f64>, OpsError> {
    let total = out.len();
    let bad = out
        .iter()
        .filter(|v| !matches!(v, Some(x) if x.is_finite()))
        .count();
    if bad > 0 {
        return Err(OpsError::DomainViolation { op, bad, total });
    }
    Ok(out.into_iter().flatten().collect())
}

/// Applies a unary operation elementwise.
///
/// Besides the explicit guards, any element whose result overflows (e.g.
/// `cube` of a huge value) also counts as a domain violation.
pub fn apply_unary(op: Operation, x: &[f64]) -> Result<Vec<f64>, OpsError> {
    if !op.is_unary() {
        return Err(OpsError::ArityMismatch { op, expected: 2 });
    }
    let out = x
        .iter()
        .map(|&v| op.unary_guard(v).then(|| op.unary_value(v)))
        .collect();
    finish(op, out)
}

pub fn apply_binary(op: Operation, x: &[f64], y: &[f64]) -> Result<Vec<f64>, OpsError> {
    if !op.is_binary() {
        return Err(OpsError::ArityMismatch { op, expected: 1 });
    }
    if x.len() != y.len() {
        return Err(OpsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let out = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| op.binary_value(a, b))
        .collect();
    finish(op, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn registry_shape() {
        assert_eq!(Operation::ALL.len(), 14);
        assert_eq!(Operation::unary().count(), 10);
        let binary: Vec<_> = Operation::binary().map(Operation::name).collect();
        assert_eq!(binary, ["plus", "subtract", "multiply", "divide"]);
        for op in Operation::ALL {
            assert_eq!(lookup(op.name()), Ok(op));
            assert_eq!(op.name().parse::<Operation>(), Ok(op));
        }
    }

    #[test]
    fn lookup_examples() {
        assert!(lookup("sigmoid").unwrap().is_unary());
        assert!(lookup("divide").unwrap().is_binary());
        assert_eq!(
            lookup("modulo"),
            Err(OpsError::UnknownOperation("modulo".into()))
        );
    }

    #[test]
    fn unary_examples() {
        assert_eq!(apply_unary(Operation::Sigmoid, &[0.0]).unwrap(), [0.5]);
        assert_eq!(apply_unary(Operation::Square, &[2.0, -3.0]).unwrap(), [4.0, 9.0]);
        let err = apply_unary(Operation::Log, &[1.0, 0.0]).unwrap_err();
        assert_eq!(
            err,
            OpsError::DomainViolation {
                op: Operation::Log,
                bad: 1,
                total: 2
            }
        );
        assert_eq!(err.fraction_bad(), 0.5);
    }

    #[test]
    fn guards() {
        assert_eq!(apply_unary(Operation::Sqrt, &[0.0]).unwrap(), [0.0]);
        assert!(apply_unary(Operation::Sqrt, &[-1e-300]).is_err());
        assert!(apply_unary(Operation::Reciprocal, &[1e-13]).is_err());
        assert!(apply_unary(Operation::Exp, &[700.0]).is_ok());
        assert!(apply_unary(Operation::Exp, &[700.5]).is_err());
        assert!(apply_unary(Operation::Tan, &[std::f64::consts::FRAC_PI_2]).is_err());
        assert!(apply_unary(Operation::Cube, &[1e120]).is_err());
        assert!(apply_unary(Operation::Plus, &[1.0]).is_err());
    }

    #[test]
    fn binary_examples() {
        assert_eq!(
            apply_binary(Operation::Plus, &[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            [4.0, 6.0]
        );
        assert!(matches!(
            apply_binary(Operation::Divide, &[1.0], &[0.0]),
            Err(OpsError::DomainViolation {
                op: Operation::Divide,
                ..
            })
        ));
        assert_eq!(
            apply_binary(Operation::Multiply, &[2.0, 0.0], &[5.0, 9.0]).unwrap(),
            [10.0, 0.0]
        );
        assert_eq!(
            apply_binary(Operation::Plus, &[1.0], &[1.0, 2.0]),
            Err(OpsError::LengthMismatch { left: 1, right: 2 })
        );
    }

    fn any_value() -> impl Strategy<Value = f64> {
        prop_oneof![
            -10.0f64..10.0,
            -1e3f64..1e3,
            Just(0.0),
            Just(1e-13),
            Just(-1e200),
            Just(1e200),
            Just(std::f64::consts::FRAC_PI_2),
        ]
    }

    proptest! {
        #[test]
        fn accepted_output_is_finite(xs in prop::collection::vec(any_value(), 1..20),
                                     ys in prop::collection::vec(any_value(), 1..20)) {
            let n = xs.len().min(ys.len());
            let (xs, ys) = (&xs[..n], &ys[..n]);
            for op in Operation::unary() {
                if let Ok(out) = apply_unary(op, xs) {
                    prop_assert_eq!(out.len(), n);
                    prop_assert!(out.iter().all(|v| v.is_finite()));
                }
            }
            for op in Operation::binary() {
                if let Ok(out) = apply_binary(op, xs, ys) {
                    prop_assert_eq!(out.len(), n);
                    prop_assert!(out.iter().all(|v| v.is_finite()));
                }
            }
        }

        #[test]
        fn commutative_ops_commute(xs in prop::collection::vec(-1e6f64..1e6, 1..20)) {
            let ys: Vec<f64> = xs.iter().rev().copied().collect();
            for op in [Operation::Plus, Operation::Multiply] {
                prop_assert_eq!(apply_binary(op, &xs, &ys), apply_binary(op, &ys, &xs));
            }
        }
    }
}
