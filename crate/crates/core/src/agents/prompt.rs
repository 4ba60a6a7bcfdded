//! Prompt rendering for LLM agents.
//!
//! The prompt has three sections, always in this order: the feature
//! engineering brief, the feedback history, and the reply format.

use std::fmt::Write;

use super::AgentContext;
use crate::ops::Operation;

pub const SECTION_FEATURES: &str = "## Feature Engineering";
pub const SECTION_FEEDBACK: &str = "## Iterative Refinement and Evaluation";
pub const SECTION_FORMAT: &str = "## Markdown and Organization";
/// Rendered in place of the feedback table on the first round.
pub const NO_FEEDBACK: &str = "There is no prior feedback; this is the first iteration.";

/// Fixed text around the generated parts of a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub system: String,
    /// Persona line; `{strategy}` is replaced with the agent's strategy.
    pub persona: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system: "You are an expert data scientist who engineers explainable features \
                     for tabular classification. You follow output formats exactly."
                .into(),
            persona: "You are one of several expert feature-engineering agents. \
                      Your strategy: {strategy}."
                .into(),
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

/// Renders the user prompt for one agent and round.
pub fn build_prompt(ctx: &AgentContext, template: &PromptTemplate, strategy: &str) -> String {
    let mut p = String::new();
    let unary: Vec<&str> = ctx
        .operations
        .iter()
        .filter(|o| o.is_unary())
        .map(|o| o.name())
        .collect();
    let binary: Vec<&str> = ctx
        .operations
        .iter()
        .filter(|o| o.is_binary())
        .map(|o| o.name())
        .collect();

    // Section 1.
    let _ = writeln!(p, "{SECTION_FEATURES}\n");
    let _ = writeln!(p, "{}", template.persona.replace("{strategy}", strategy));
    let _ = writeln!(p, "You are agent {} working on iteration {}.", ctx.agent_id, ctx.iteration);
    let _ = writeln!(p, "Task: {}.\n", ctx.task);
    let _ = writeln!(p, "Current features ({}), statistics over the training rows:\n", ctx.subset.len());
    let _ = writeln!(p, "| feature | mean | std | min | max |");
    let _ = writeln!(p, "|---|---|---|---|---|");
    for e in ctx.subset.exprs() {
        match ctx.profiles.iter().find(|pr| pr.name == e.name()) {
            Some(pr) => {
                let _ = writeln!(
                    p,
                    "| {} | {} | {} | {} | {} |",
                    pr.name,
                    fmt_num(pr.mean),
                    fmt_num(pr.std),
                    fmt_num(pr.min),
                    fmt_num(pr.max)
                );
            }
            None => {
                let _ = writeln!(p, "| {} | - | - | - | - |", e.name());
            }
        }
    }
    if let Some(visible) = &ctx.visible {
        let mut names: Vec<&str> = visible.iter().map(String::as_str).collect();
        names.sort_unstable();
        let _ = writeln!(p, "\nYou may only use these features as operands: {}", names.join(", "));
    }
    let ops: Vec<&str> = ctx.operations.iter().map(|o| o.name()).collect();
    let _ = writeln!(p, "\nOperations: {}", ops.join(", "));
    let _ = writeln!(p, "Unary (one operand): {}", unary.join(", "));
    let _ = writeln!(p, "Binary (two operands): {}", binary.join(", "));
    let _ = writeln!(
        p,
        "Generate at most {} new features. New features may nest up to depth {}.",
        ctx.k_max, ctx.max_depth
    );
    if ctx.allow_drops {
        let _ = writeln!(p, "You may drop generated features that stopped helping; original columns must stay.");
    }

    // Section 2.
    let _ = writeln!(p, "\n{SECTION_FEEDBACK}\n");
    if ctx.feedback.is_empty() {
        let _ = writeln!(p, "{NO_FEEDBACK}");
    } else {
        let _ = writeln!(p, "Downstream results of your previous feature sets (delta is the change from the round before):\n");
        let _ = writeln!(p, "| t | accuracy | precision | recall | f1 | delta |");
        let _ = writeln!(p, "|---|---|---|---|---|---|");
        for f in &ctx.feedback {
            let m = &f.metrics;
            let _ = writeln!(
                p,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:+.4} |",
                f.iteration, m.accuracy, m.precision, m.recall, m.f1, f.delta
            );
        }
        let _ = writeln!(
            p,
            "\nKeep strategies that raised the metric; adjust or replace those that lowered it."
        );
    }
    if !ctx.rejected.is_empty() {
        let _ = writeln!(p, "\nRejected last round:");
        for (name, why) in &ctx.rejected {
            let _ = writeln!(p, "- {name}: {why}");
        }
    }
    if !ctx.peer_rationales.is_empty() {
        let _ = writeln!(p, "\nReasoning shared by the other agents:");
        for (id, text) in &ctx.peer_rationales {
            let _ = writeln!(p, "- agent {id}: {}", text.replace('\n', " "));
        }
    }

    // Section 3.
    let _ = writeln!(p, "\n{SECTION_FORMAT}\n");
    let _ = writeln!(
        p,
        "Reply with exactly one fenced code block. Inside it, one action per line:\n\n\
         ```\n\
         GEN <op> <feature>\n\
         GEN <op> <feature> <feature>\n\
         DROP <feature>\n\
         RATIONALE: <why you chose these operations>\n\
         ```\n\n\
         Use unary operations with one feature and binary operations with two. \
         Feature names must be copied exactly from the table above. \
         RATIONALE comes last and may span several lines."
    );
    p
}

/// Every registry name, in registry order, comma separated.
pub fn operation_list() -> String {
    Operation::ALL.map(|o| o.name()).join(", ")
}
