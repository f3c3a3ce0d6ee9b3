use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{KbError, KnowledgeBase};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JustificationArc {
    pub cause: String,
    pub effect: String,
    /// `"<cause> -> <effect>"`, for display.
    pub label: String,
}

/// The ancestor sub-DAG of a variable: the nodes that can justify it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JustificationGraph {
    pub root: String,
    pub nodes: BTreeSet<String>,
    pub arcs: Vec<JustificationArc>,
}

pub fn justification_trace(kb: &KnowledgeBase, var: &str) -> Result<JustificationGraph, KbError> {
    if kb.variable(var).is_none() {
        return Err(KbError::UnknownVariable(var.to_string()));
    }
    let mut nodes = kb.ancestors(var);
    nodes.insert(var.to_string());
    let arcs = kb
        .arcs
        .iter()
        .filter(|(a, b)| nodes.contains(a) && nodes.contains(b))
        .map(|(a, b)| JustificationArc { cause: a.clone(), effect: b.clone(), label: format!("{a} -> {b}") })
        .collect();
    Ok(JustificationGraph { root: var.to_string(), nodes, arcs })
}
