//! Generated features as expression trees over base columns.
//!
//! Every expression carries a canonical name in fully parenthesized prefix
//! form, e.g. `plus(f1,square(f2))`. Children of `plus` and `multiply` are
//! ordered by canonical name, so the name identifies an expression up to
//! commutativity and doubles as its dedup key and provenance label.
//!
//! Grammar: `name := column | op "(" name {"," name} ")"`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::data::{is_valid_column_name, Dataset};
use crate::ops::{self, Operation, OpsError};

/// Default bound on composition depth for generated features.
pub const DEFAULT_MAX_DEPTH: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error(transparent)]
    Ops(#[from] OpsError),
    #[error("cannot parse {input:?} at byte {pos}: {reason}")]
    Parse {
        input: String,
        pos: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ExprKind {
    Base(String),
    Unary(Operation, FeatureExpr),
    Binary(Operation, FeatureExpr, FeatureExpr),
}

#[derive(Debug, PartialEq, Eq, Hash)]
struct Node {
    kind: ExprKind,
    name: String,
    depth: usize,
}

/// An immutable, cheaply clonable feature expression.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct FeatureExpr(Arc<Node>);

impl FeatureExpr {
    pub fn base(column: impl Into<String>) -> Self {
        let column = column.into();
        FeatureExpr(Arc::new(Node {
            name: column.clone(),
            kind: ExprKind::Base(column),
            depth: 0,
        }))
    }

    pub fn unary(op: Operation, child: FeatureExpr) -> Result<Self, OpsError> {
        if !op.is_unary() {
            return Err(OpsError::ArityMismatch { op, expected: 2 });
        }
        Ok(FeatureExpr(Arc::new(Node {
            name: format!("{op}({})", child.name()),
            depth: child.depth() + 1,
            kind: ExprKind::Unary(op, child),
        })))
    }

    /// Builds a binary node; commutative operands are put in canonical order.
    pub fn binary(op: Operation, left: FeatureExpr, right: FeatureExpr) -> Result<Self, OpsError> {
        if !op.is_binary() {
            return Err(OpsError::ArityMismatch { op, expected: 1 });
        }
        let (left, right) = if op.is_commutative() && right.name() < left.name() {
            (right, left)
        } else {
            (left, right)
        };
        Ok(FeatureExpr(Arc::new(Node {
            name: format!("{op}({},{})", left.name(), right.name()),
            depth: 1 + left.depth().max(right.depth()),
            kind: ExprKind::Binary(op, left, right),
        })))
    }

    /// Applies `op` to one or two operands, dispatching on arity.
    pub fn apply(op: Operation, operands: &[FeatureExpr]) -> Result<Self, OpsError> {
        match operands {
            [x] => Self::unary(op, x.clone()),
            [x, y] => Self::binary(op, x.clone(), y.clone()),
            _ => Err(OpsError::ArityMismatch {
                op,
                expected: op.arity(),
            }),
        }
    }

    pub fn kind(&self) -> &ExprKind {
        &self.0.kind
    }

    /// The canonical name.
    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn depth(&self) -> usize {
        self.0.depth
    }

    pub fn is_base(&self) -> bool {
        matches!(self.0.kind, ExprKind::Base(_))
    }

    /// Base column names referenced anywhere in the tree.
    pub fn columns(&self) -> HashSet<&str> {
        let mut out = HashSet::new();
        self.visit(&mut |e| {
            if let ExprKind::Base(c) = e.kind() {
                out.insert(c.as_str());
            }
        });
        out
    }

    /// Operations used anywhere in the tree.
    pub fn operations(&self) -> HashSet<Operation> {
        let mut out = HashSet::new();
        self.visit(&mut |e| match e.kind() {
            ExprKind::Unary(op, _) | ExprKind::Binary(op, _, _) => {
                out.insert(*op);
            }
            ExprKind::Base(_) => {}
        });
        out
    }

    /// Post-order traversal (children before parents, left before right).
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a FeatureExpr)) {
        match self.kind() {
            ExprKind::Base(_) => {}
            ExprKind::Unary(_, c) => c.visit(f),
            ExprKind::Binary(_, l, r) => {
                l.visit(f);
                r.visit(f);
            }
        }
        f(self);
    }
}

impl fmt::Display for FeatureExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Debug for FeatureExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FeatureExpr({})", self.name())
    }
}

impl Serialize for FeatureExpr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for FeatureExpr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Canonical name of an expression.
pub fn canonical_name(e: &FeatureExpr) -> &str {
    e.name()
}

/// Parses a canonical (or merely well-formed) name back into an expression.
/// Commutative operands are re-normalized, so
/// `parse("plus(f2,f1)")` has the canonical name `plus(f1,f2)`.
pub fn parse(input: &str) -> Result<FeatureExpr, ExprError> {
    let mut p = Parser { input, pos: 0 };
    let e = p.expr()?;
    if p.pos != input.len() {
        return Err(p.error("trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    input: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, reason: &str) -> ExprError {
        ExprError::Parse {
            input: self.input.to_owned(),
            pos: self.pos,
            reason: reason.to_owned(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.input.as_bytes().get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), ExprError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected {:?}", c as char)))
        }
    }

    fn expr(&mut self) -> Result<FeatureExpr, ExprError> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if matches!(c, b'(' | b')' | b',') || c.is_ascii_whitespace() {
                break;
            }
            self.pos += self.input[self.pos..].chars().next().map_or(1, char::len_utf8);
        }
        let token = &self.input[start..self.pos];
        if token.is_empty() || !is_valid_column_name(token) {
            return Err(self.error("expected a column or operation name"));
        }
        if self.peek() != Some(b'(') {
            return Ok(FeatureExpr::base(token));
        }
        let op = ops::lookup(token)?;
        self.pos += 1;
        let mut args = vec![self.expr()?];
        while self.peek() == Some(b',') {
            self.pos += 1;
            args.push(self.expr()?);
        }
        self.expect(b')')?;
        Ok(FeatureExpr::apply(op, &args)?)
    }
}

/// Evaluates an expression bottom-up against a dataset.
pub fn evaluate(e: &FeatureExpr, d: &Dataset) -> Result<Vec<f64>, ExprError> {
    Ok(evaluate_shared(e, d, None)?.to_vec())
}

fn evaluate_shared(
    e: &FeatureExpr,
    d: &Dataset,
    cache: Option<&EvalCache>,
) -> Result<Arc<[f64]>, ExprError> {
    if let ExprKind::Base(c) = e.kind() {
        return d
            .column(c)
            .map(|col| col.values.clone())
            .ok_or_else(|| ExprError::UnknownColumn(c.clone()));
    }
    if let Some(hit) = cache.and_then(|c| c.get(d.id(), e.name())) {
        return Ok(hit);
    }
    let values: Arc<[f64]> = match e.kind() {
        ExprKind::Unary(op, x) => ops::apply_unary(*op, &evaluate_shared(x, d, cache)?)?.into(),
        ExprKind::Binary(op, x, y) => ops::apply_binary(
            *op,
            &evaluate_shared(x, d, cache)?,
            &evaluate_shared(y, d, cache)?,
        )?
        .into(),
        ExprKind::Base(_) => unreachable!(),
    };
    if let Some(c) = cache {
        c.insert(d.id(), e.name(), values.clone());
    }
    Ok(values)
}

/// Memoizes evaluated columns by (dataset id, canonical name).
///
/// Concurrent inserts of the same key are harmless: the values are
/// identical, the last write wins.
#[derive(Debug, Default)]
pub struct EvalCache {
    map: RwLock<HashMap<(u64, String), Arc<[f64]>>>,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn get(&self, dataset: u64, name: &str) -> Option<Arc<[f64]>> {
        let map = self.map.read().unwrap_or_else(|e| e.into_inner());
        map.get(&(dataset, name.to_owned())).cloned()
    }

    fn insert(&self, dataset: u64, name: &str, values: Arc<[f64]>) {
        let mut map = self.map.write().unwrap_or_else(|e| e.into_inner());
        map.insert((dataset, name.to_owned()), values);
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cached evaluation; same result as [`evaluate`].
    pub fn evaluate(&self, e: &FeatureExpr, d: &Dataset) -> Result<Arc<[f64]>, ExprError> {
        evaluate_shared(e, d, Some(self))
    }

    /// Like [`EvalCache::evaluate`] but leaves the top node out of the cache.
    /// Meant for scoring throwaway candidates.
    pub fn evaluate_transient(&self, e: &FeatureExpr, d: &Dataset) -> Result<Arc<[f64]>, ExprError> {
        if let Some(hit) = self.get(d.id(), e.name()) {
            return Ok(hit);
        }
        Ok(match e.kind() {
            ExprKind::Base(_) => evaluate_shared(e, d, Some(self))?,
            ExprKind::Unary(op, x) => ops::apply_unary(*op, &self.evaluate(x, d)?)?.into(),
            ExprKind::Binary(op, x, y) => {
                ops::apply_binary(*op, &self.evaluate(x, d)?, &self.evaluate(y, d)?)?.into()
            }
        })
    }
}

/// Drops later duplicates by canonical name, keeping first occurrences in order.
pub fn dedupe(exprs: impl IntoIterator<Item = FeatureExpr>) -> Vec<FeatureExpr> {
    let mut seen = HashSet::new();
    exprs
        .into_iter()
        .filter(|e| seen.insert(e.name().to_owned()))
        .collect()
}

/// Human-readable derivation of an expression, one line per distinct node,
/// leaves first.
///
/// ```
/// use featgen::expr::{lineage, parse};
/// let e = parse("plus(f1,f2)").unwrap();
/// assert_eq!(lineage(&e), ["f1 (base)", "f2 (base)", "plus(f1,f2) = f1 + f2"]);
/// ```
pub fn lineage(e: &FeatureExpr) -> Vec<String> {
    let mut nodes = Vec::new();
    e.visit(&mut |n| nodes.push(n));
    let mut seen = HashSet::new();
    nodes.retain(|n| seen.insert(n.name()));
    let (leaves, internal): (Vec<_>, Vec<_>) = nodes.into_iter().partition(|n| n.is_base());
    leaves
        .into_iter()
        .map(|n| format!("{} (base)", n.name()))
        .chain(
            internal
                .into_iter()
                .map(|n| format!("{} = {}", n.name(), math(n, true))),
        )
        .collect()
}

fn binary_symbol(op: Operation) -> &'static str {
    match op {
        Operation::Plus => "+",
        Operation::Subtract => "-",
        Operation::Multiply => "*",
        Operation::Divide => "/",
        _ => unreachable!(),
    }
}

/// Infix rendering. Only the outermost binary operator gets spaces.
fn math(e: &FeatureExpr, top: bool) -> String {
    match e.kind() {
        ExprKind::Base(c) => c.clone(),
        ExprKind::Binary(op, l, r) => {
            let sym = binary_symbol(*op);
            if top {
                format!("{} {sym} {}", math(l, false), math(r, false))
            } else {
                format!("({}{sym}{})", math(l, false), math(r, false))
            }
        }
        ExprKind::Unary(op, x) => {
            let inner = math(x, false);
            match op {
                Operation::Square | Operation::Cube | Operation::Reciprocal => {
                    let atom = match x.kind() {
                        ExprKind::Unary(Operation::Square | Operation::Cube, _) => format!("({inner})"),
                        _ => inner,
                    };
                    match op {
                        Operation::Square => format!("{atom}^2"),
                        Operation::Cube => format!("{atom}^3"),
                        _ if top => format!("1/{atom}"),
                        _ => format!("(1/{atom})"),
                    }
                }
                _ => {
                    // Binary children come back wrapped; the call parens suffice.
                    let bare = match x.kind() {
                        ExprKind::Binary(..) => inner[1..inner.len() - 1].to_owned(),
                        _ => inner,
                    };
                    format!("{op}({bare})")
                }
            }
        }
    }
}

/// An ordered, duplicate-free collection of feature expressions.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureSubset {
    exprs: Vec<FeatureExpr>,
    /// Search node that produced this subset.
    pub origin: Option<usize>,
}

impl FeatureSubset {
    pub fn new(exprs: impl IntoIterator<Item = FeatureExpr>, origin: Option<usize>) -> Self {
        FeatureSubset {
            exprs: dedupe(exprs),
            origin,
        }
    }

    /// All raw columns of a dataset, in column order.
    pub fn from_dataset(d: &Dataset) -> Self {
        Self::new(d.column_names().map(FeatureExpr::base), None)
    }

    pub fn exprs(&self) -> &[FeatureExpr] {
        &self.exprs
    }

    pub fn len(&self) -> usize {
        self.exprs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exprs.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.exprs.iter().map(|e| e.name().to_owned()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&FeatureExpr> {
        self.exprs.iter().find(|e| e.name() == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Appends unless an expression with the same canonical name exists.
    pub fn push(&mut self, e: FeatureExpr) -> bool {
        if self.contains(e.name()) {
            return false;
        }
        self.exprs.push(e);
        true
    }

    pub fn remove(&mut self, name: &str) -> Option<FeatureExpr> {
        let i = self.exprs.iter().position(|e| e.name() == name)?;
        Some(self.exprs.remove(i))
    }

    /// Operations used anywhere in the subset.
    pub fn operations(&self) -> HashSet<Operation> {
        self.exprs.iter().flat_map(|e| e.operations()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(c: &str) -> FeatureExpr {
        FeatureExpr::base(c)
    }

    fn toy() -> Dataset {
        let f1 = (0..10).map(|i| i as f64).collect();
        let f2 = (0..10).map(|i| 10.0 - i as f64).collect();
        Dataset::new(
            vec![("f1".into(), f1), ("f2".into(), f2)],
            (0..10).map(|i| i % 2).collect(),
        )
        .unwrap()
    }

    #[test]
    fn canonical_names() {
        assert_eq!(canonical_name(&b("f3")), "f3");
        let plus = FeatureExpr::binary(Operation::Plus, b("f2"), b("f1")).unwrap();
        assert_eq!(plus.name(), "plus(f1,f2)");
        let div = FeatureExpr::binary(Operation::Divide, b("f1"), b("f2")).unwrap();
        let log = FeatureExpr::unary(Operation::Log, div).unwrap();
        assert_eq!(log.name(), "log(divide(f1,f2))");
        assert_eq!(log.depth(), 2);
        let sub = FeatureExpr::binary(Operation::Subtract, b("f2"), b("f1")).unwrap();
        assert_eq!(sub.name(), "subtract(f2,f1)");
    }

    #[test]
    fn evaluate_examples() {
        let d = toy();
        assert_eq!(evaluate(&b("f1"), &d).unwrap(), d.column("f1").unwrap().values.to_vec());
        let plus = parse("plus(f1,f2)").unwrap();
        assert_eq!(evaluate(&plus, &d).unwrap(), vec![10.0; 10]);
        let sig = parse("sigmoid(multiply(f1,f2))").unwrap();
        // f1[0] * f2[0] = 0 * 10 = 0, sigmoid(0) = 1/2
        assert_eq!(evaluate(&sig, &d).unwrap()[0], 0.5);
        assert_eq!(
            evaluate(&b("nope"), &d),
            Err(ExprError::UnknownColumn("nope".into()))
        );
        assert!(matches!(
            evaluate(&parse("log(f1)").unwrap(), &d),
            Err(ExprError::Ops(OpsError::DomainViolation { .. }))
        ));
    }

    #[test]
    fn cache_is_transparent() {
        let d = toy();
        let cache = EvalCache::new();
        let e = parse("square(plus(f1,cos(f2)))").unwrap();
        let direct = evaluate(&e, &d).unwrap();
        assert_eq!(cache.evaluate(&e, &d).unwrap().to_vec(), direct);
        assert_eq!(cache.len(), 3);
        assert_eq!(cache.evaluate(&e, &d).unwrap().to_vec(), direct);
    }

    #[test]
    fn dedupe_examples() {
        let p1 = parse("plus(f1,f2)").unwrap();
        let p2 = FeatureExpr::binary(Operation::Plus, b("f2"), b("f1")).unwrap();
        assert_eq!(dedupe(vec![b("f1"), p1.clone(), p2]), vec![b("f1"), p1]);
        assert_eq!(dedupe(Vec::new()), Vec::<FeatureExpr>::new());
        assert_eq!(dedupe(vec![b("f1"), b("f1"), b("f1")]), vec![b("f1")]);
    }

    #[test]
    fn lineage_examples() {
        assert_eq!(lineage(&b("f1")), ["f1 (base)"]);
        let sq = parse("square(plus(f1,f2))").unwrap();
        let lines = lineage(&sq);
        assert_eq!(lines.last().unwrap(), "square(plus(f1,f2)) = (f1+f2)^2");
        assert_eq!(lines[2], "plus(f1,f2) = f1 + f2");
        assert_eq!(lines.len(), 4);
        let nested = parse("sigmoid(multiply(f1,reciprocal(f2)))").unwrap();
        assert_eq!(
            lineage(&nested).last().unwrap(),
            "sigmoid(multiply(f1,reciprocal(f2))) = sigmoid(f1*(1/f2))"
        );
    }

    #[test]
    fn parse_errors() {
        for bad in ["", "plus(f1,f2", "plus(f1)", "modulo(f1,f2)", "f1)", "sqrt(f1,f2)", "a b"] {
            assert!(parse(bad).is_err(), "{bad:?} should not parse");
        }
        // Operation tokens without parentheses are ordinary column names.
        assert!(parse("sqrt").unwrap().is_base());
    }

    #[test]
    fn subset_dedupes_and_tracks_ops() {
        let mut s = FeatureSubset::new([b("f1"), b("f2"), b("f1")], None);
        assert_eq!(s.len(), 2);
        assert!(s.push(parse("square(plus(f2,f1))").unwrap()));
        assert!(!s.push(parse("square(plus(f1,f2))").unwrap()));
        let ops: HashSet<_> = [Operation::Square, Operation::Plus].into();
        assert_eq!(s.operations(), ops);
        assert!(s.remove("square(plus(f1,f2))").is_some());
        assert_eq!(s.names(), ["f1", "f2"]);
    }

    pub(crate) fn arb_expr() -> impl Strategy<Value = FeatureExpr> {
        let leaf = prop::sample::select(vec!["f1", "f2", "f3", "x_a"]).prop_map(FeatureExpr::base);
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                (prop::sample::select(Operation::unary().collect::<Vec<_>>()), inner.clone())
                    .prop_map(|(op, c)| FeatureExpr::unary(op, c).unwrap()),
                (
                    prop::sample::select(Operation::binary().collect::<Vec<_>>()),
                    inner.clone(),
                    inner
                )
                    .prop_map(|(op, l, r)| FeatureExpr::binary(op, l, r).unwrap()),
            ]
        })
    }

    /// Independent oracle: recompute through the ops module directly.
    fn brute_force(e: &FeatureExpr, d: &Dataset) -> Result<Vec<f64>, OpsError> {
        match e.kind() {
            ExprKind::Base(c) => Ok(d.column(c).unwrap().values.to_vec()),
            ExprKind::Unary(op, x) => ops::apply_unary(*op, &brute_force(x, d)?),
            ExprKind::Binary(op, x, y) => ops::apply_binary(*op, &brute_force(x, d)?, &brute_force(y, d)?),
        }
    }

    proptest! {
        #[test]
        fn name_round_trips(e in arb_expr()) {
            let parsed = parse(e.name()).unwrap();
            prop_assert_eq!(parsed.name(), e.name());
            prop_assert_eq!(&parsed, &e);
        }

        #[test]
        fn evaluate_matches_manual_composition(e in arb_expr()) {
            let d = Dataset::new(
                vec![
                    ("f1".into(), (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()),
                    ("f2".into(), (0..12).map(|i| 1.0 + (i as f64).sin()).collect()),
                    ("f3".into(), (0..12).map(|i| (i * i) as f64).collect()),
                    ("x_a".into(), (0..12).map(|i| 2.5 - i as f64).collect()),
                ],
                (0..12).map(|i| i % 3).collect(),
            ).unwrap();
            let got = evaluate(&e, &d);
            let want = brute_force(&e, &d);
            match (got, want) {
                (Ok(g), Ok(w)) => prop_assert!(g.iter().zip(&w).all(|(a, b)| a.to_bits() == b.to_bits())),
                (Err(ExprError::Ops(g)), Err(w)) => prop_assert_eq!(g, w),
                (g, w) => prop_assert!(false, "diverged: {:?} vs {:?}", g, w),
            }
        }

        #[test]
        fn depth_is_one_plus_max_child(e in arb_expr()) {
            let want = match e.kind() {
                ExprKind::Base(_) => 0,
                ExprKind::Unary(_, c) => 1 + c.depth(),
                ExprKind::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
            };
            prop_assert_eq!(e.depth(), want);
        }
    }
}
