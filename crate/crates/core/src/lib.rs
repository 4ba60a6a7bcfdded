//! Explainable feature generation for tabular classification.
//!
//! Agents propose new columns built from a fixed set of mathematical
//! operations; each proposed subset is scored by a downstream classifier and
//! the results steer a layered, UCB-guided tree search. Every generated
//! feature carries a canonical name that doubles as its derivation.

pub mod agents;
pub mod cli;
pub mod data;
pub mod eval;
pub mod expr;
pub mod ops;
pub mod search;
