//! Line grammar for agent replies.
//!
//! A reply holds one fenced block (or, without fences, the whole text is
//! the block). Each nonempty line is one of
//!
//! ```text
//! GEN <op> <name>
//! GEN <op> <name> <name>
//! DROP <name>
//! RATIONALE: <free text to the end of the block>
//! ```
//!
//! Any bad line fails the whole reply.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::{self, Operation};

/// One edit to a feature subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum Action {
    Generate { op: Operation, operands: Vec<String> },
    Drop { feature: String },
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Generate { op, operands } => write!(f, "GEN {op} {}", operands.join(" ")),
            Action::Drop { feature } => write!(f, "DROP {feature}"),
        }
    }
}

/// A parsed, validated set of actions plus the agent's stated reasoning.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgentProposal {
    pub actions: Vec<Action>,
    pub rationale: String,
}

impl AgentProposal {
    pub fn empty(rationale: impl Into<String>) -> Self {
        AgentProposal {
            actions: Vec::new(),
            rationale: rationale.into(),
        }
    }

    pub fn generate_count(&self) -> usize {
        self.actions
            .iter()
            .filter(|a| matches!(a, Action::Generate { .. }))
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Why a reply was rejected.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MalformedReason {
    #[error("empty response")]
    EmptyResponse,
    #[error("fenced block is never closed")]
    UnterminatedBlock,
    #[error("unrecognized line {0:?}")]
    UnrecognizedLine(String),
    #[error("unknown operation {0:?}")]
    UnknownOperation(String),
    #[error("{op} takes {expected} operand(s), got {got}")]
    ArityMismatch {
        op: Operation,
        expected: usize,
        got: usize,
    },
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("{got} GEN actions exceed the limit of {max}")]
    TooManyGenerates { got: usize, max: usize },
    #[error("original feature {0:?} cannot be dropped")]
    DropOfOriginal(String),
    #[error("DROP actions are disabled")]
    DropsDisabled,
    #[error("operation {0} is not available this round")]
    OperationNotAllowed(Operation),
    #[error("{name} exceeds the depth limit of {max}")]
    DepthExceeded { name: String, max: usize },
}

impl MalformedReason {
    pub fn kind(&self) -> &'static str {
        match self {
            MalformedReason::EmptyResponse => "EmptyResponse",
            MalformedReason::UnterminatedBlock => "UnterminatedBlock",
            MalformedReason::UnrecognizedLine(_) => "UnrecognizedLine",
            MalformedReason::UnknownOperation(_) => "UnknownOperation",
            MalformedReason::ArityMismatch { .. } => "ArityMismatch",
            MalformedReason::UnknownFeature(_) => "UnknownFeature",
            MalformedReason::TooManyGenerates { .. } => "TooManyGenerates",
            MalformedReason::DropOfOriginal(_) => "DropOfOriginal",
            MalformedReason::DropsDisabled => "DropsDisabled",
            MalformedReason::OperationNotAllowed(_) => "OperationNotAllowed",
            MalformedReason::DepthExceeded { .. } => "DepthExceeded",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed response: {0}")]
pub struct MalformedResponse(pub MalformedReason);

const FENCE: &str = "```";

/// Renders a proposal in the reply grammar; inverse of [`parse_response`].
pub fn render(p: &AgentProposal) -> String {
    let mut out = String::from("```\n");
    for a in &p.actions {
        out.push_str(&a.to_string());
        out.push('\n');
    }
    out.push_str("RATIONALE: ");
    out.push_str(&p.rationale);
    out.push_str("\n```\n");
    out
}

fn block(text: &str) -> Result<&str, MalformedReason> {
    let Some(open) = text.find(FENCE) else {
        return Ok(text);
    };
    let after = &text[open + FENCE.len()..];
    // Skip an info string such as ```text.
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    let close = body.find(FENCE).ok_or(MalformedReason::UnterminatedBlock)?;
    Ok(&body[..close])
}

/// Parses a reply, checking syntax, operation names and arities.
///
/// Feature names are not checked here; see
/// [`AgentContext::validate`](super::AgentContext::validate).
pub fn parse_response(text: &str) -> Result<AgentProposal, MalformedResponse> {
    parse_inner(text).map_err(MalformedResponse)
}

fn parse_inner(text: &str) -> Result<AgentProposal, MalformedReason> {
    if text.trim().is_empty() {
        return Err(MalformedReason::EmptyResponse);
    }
    let body = block(text)?;
    let mut actions = Vec::new();
    let mut rationale: Option<String> = None;
    for raw in body.lines() {
        if let Some(r) = rationale.as_mut() {
            r.push('\n');
            r.push_str(raw);
            continue;
        }
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("RATIONALE:") {
            rationale = Some(rest.to_owned());
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("GEN") => {
                let op_name = tokens
                    .next()
                    .ok_or_else(|| MalformedReason::UnrecognizedLine(line.to_owned()))?;
                let op = ops::lookup(op_name)
                    .map_err(|_| MalformedReason::UnknownOperation(op_name.to_owned()))?;
                let operands: Vec<String> = tokens.map(str::to_owned).collect();
                if operands.len() != op.arity() {
                    return Err(MalformedReason::ArityMismatch {
                        op,
                        expected: op.arity(),
                        got: operands.len(),
                    });
                }
                actions.push(Action::Generate { op, operands });
            }
            Some("DROP") => match (tokens.next(), tokens.next()) {
                (Some(feature), None) => actions.push(Action::Drop {
                    feature: feature.to_owned(),
                }),
                _ => return Err(MalformedReason::UnrecognizedLine(line.to_owned())),
            },
            _ => return Err(MalformedReason::UnrecognizedLine(line.to_owned())),
        }
    }
    Ok(AgentProposal {
        actions,
        rationale: rationale.map(|r| r.trim().to_owned()).unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reason(text: &str) -> MalformedReason {
        parse_response(text).unwrap_err().0
    }

    #[test]
    fn parses_fenced_block() {
        let p = parse_response("```\nGEN multiply f1 f2\nRATIONALE: interaction\n```").unwrap();
        assert_eq!(
            p.actions,
            [Action::Generate {
                op: Operation::Multiply,
                operands: vec!["f1".into(), "f2".into()]
            }]
        );
        assert_eq!(p.rationale, "interaction");
    }

    #[test]
    fn ignores_prose_around_block() {
        let text = "Sure, here you go:\n```text\nGEN log f3\nDROP square(f1)\n```\nThanks!";
        let p = parse_response(text).unwrap();
        assert_eq!(p.actions.len(), 2);
        assert_eq!(p.rationale, "");
    }

    #[test]
    fn rationale_runs_to_end_of_block() {
        let p = parse_response("```\nGEN sqrt f1\nRATIONALE: first\nsecond line\n```").unwrap();
        assert_eq!(p.rationale, "first\nsecond line");
    }

    #[test]
    fn rejection_reasons() {
        assert_eq!(reason("GEN modulo f1 f2"), MalformedReason::UnknownOperation("modulo".into()));
        assert_eq!(
            reason("GEN log f1 f2"),
            MalformedReason::ArityMismatch {
                op: Operation::Log,
                expected: 1,
                got: 2
            }
        );
        assert_eq!(reason("   \n"), MalformedReason::EmptyResponse);
        assert_eq!(reason("```\nGEN log f1\n"), MalformedReason::UnterminatedBlock);
        assert_eq!(reason("ADD f1"), MalformedReason::UnrecognizedLine("ADD f1".into()));
        assert_eq!(reason("DROP a b"), MalformedReason::UnrecognizedLine("DROP a b".into()));
    }

    #[test]
    fn render_round_trip() {
        let p = AgentProposal {
            actions: vec![
                Action::Generate {
                    op: Operation::Divide,
                    operands: vec!["plus(f1,f2)".into(), "f3".into()],
                },
                Action::Drop {
                    feature: "square(f1)".into(),
                },
            ],
            rationale: "ratio of sums".into(),
        };
        assert_eq!(parse_response(&render(&p)).unwrap(), p);
    }
}
