//! Influence diagrams: chance, decision and value nodes, structural queries
//! and non-destructive edits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpt::{config_count, config_index, Cpt};
use crate::kb::{Role, UtilityTable};
use crate::PROB_TOLERANCE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChanceNode {
    pub name: String,
    pub states: Vec<String>,
    pub role: Role,
    pub normal: Option<String>,
    pub cpt: Cpt,
    /// Time label of the bank entry the CPT came from.
    pub time: String,
    pub variant: Option<String>,
}

impl ChanceNode {
    pub fn state_index(&self, state: &str) -> Option<usize> {
        self.states.iter().position(|s| s == state)
    }

    pub fn is_hypothesis(&self) -> bool {
        self.role == Role::Hypothesis
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionNode {
    pub name: String,
    pub alternatives: Vec<String>,
    /// Alternatives that are tests rather than treatments.
    pub tests: Vec<String>,
    pub chosen: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueNode {
    pub name: String,
    pub decision: String,
    pub utility: UtilityTable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Chance,
    Decision,
    Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceDiagram {
    pub time: String,
    pub chance: BTreeMap<String, ChanceNode>,
    /// In creation order; the last one is the pending decision.
    pub decisions: Vec<DecisionNode>,
    /// One sub-value node per decision; the total value is their sum.
    pub values: Vec<ValueNode>,
    pub evidence: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovBoundary {
    pub center: String,
    pub members: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DiagramEdit {
    AddChance { node: ChanceNode },
    /// With `cascade`, every child gets its CPT from `replacements`.
    RemoveChance { name: String, cascade: bool, replacements: BTreeMap<String, Cpt> },
    AddArc { from: String, to: String, cpt: Cpt },
    RemoveArc { from: String, to: String, cpt: Cpt },
    SetCpt { node: String, cpt: Cpt },
    /// `None` retracts the observation.
    SetEvidence { node: String, state: Option<String> },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagramError {
    #[error("unknown node '{0}'")]
    UnknownNode(String),
    #[error("'{0}' is not a chance node")]
    NotChance(String),
    #[error("node '{0}' already exists")]
    DuplicateNode(String),
    #[error("unknown state '{state}' for node '{node}'")]
    UnknownState { node: String, state: String },
    #[error("assignment is missing node '{0}'")]
    MissingAssignment(String),
    #[error("edit introduces a cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("node '{node}' has children {children:?}; removal needs the cascade flag")]
    HasChildren { node: String, children: Vec<String> },
    #[error("no replacement table supplied for re-parented node '{0}'")]
    MissingReplacement(String),
    #[error("table for '{node}' does not fit its parents: {detail}")]
    CptArity { node: String, detail: String },
    #[error("invalid diagram: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

impl InfluenceDiagram {
    pub fn new(time: &str) -> Self {
        Self {
            time: time.to_string(),
            chance: BTreeMap::new(),
            decisions: Vec::new(),
            values: Vec::new(),
            evidence: BTreeMap::new(),
        }
    }

    pub fn node(&self, name: &str) -> Result<&ChanceNode, DiagramError> {
        match self.chance.get(name) {
            Some(n) => Ok(n),
            None if self.kind_of(name).is_some() => Err(DiagramError::NotChance(name.to_string())),
            None => Err(DiagramError::UnknownNode(name.to_string())),
        }
    }

    pub fn kind_of(&self, name: &str) -> Option<NodeKind> {
        if self.chance.contains_key(name) {
            Some(NodeKind::Chance)
        } else if self.decisions.iter().any(|d| d.name == name) {
            Some(NodeKind::Decision)
        } else if self.values.iter().any(|v| v.name == name) {
            Some(NodeKind::Value)
        } else {
            None
        }
    }

    /// Hypothesis chance nodes in name order.
    pub fn hypotheses(&self) -> Vec<&ChanceNode> {
        self.chance.values().filter(|n| n.is_hypothesis()).collect()
    }

    pub fn hypothesis_names(&self) -> Vec<String> {
        self.hypotheses().iter().map(|n| n.name.clone()).collect()
    }

    pub fn parents(&self, name: &str) -> Vec<String> {
        self.chance.get(name).map(|n| n.cpt.parents.clone()).unwrap_or_default()
    }

    /// Chance-node children in name order.
    pub fn children(&self, name: &str) -> Vec<String> {
        self.chance
            .values()
            .filter(|n| n.cpt.parents.iter().any(|p| p == name))
            .map(|n| n.name.clone())
            .collect()
    }

    pub fn cards(&self, names: &[String]) -> Vec<usize> {
        names.iter().map(|n| self.chance.get(n).map_or(0, |c| c.states.len())).collect()
    }

    /// The decision awaiting a choice, if any.
    pub fn current_decision(&self) -> Option<&DecisionNode> {
        self.decisions.last()
    }

    /// Value node attached to the pending decision.
    pub fn current_value(&self) -> Option<&ValueNode> {
        let d = self.current_decision()?;
        self.values.iter().find(|v| v.decision == d.name)
    }

    pub fn is_decision_ready(&self) -> bool {
        self.current_decision().is_some_and(|d| !d.alternatives.is_empty()) && self.current_value().is_some()
    }

    /// Total node count across all three kinds.
    pub fn node_count(&self) -> usize {
        self.chance.len() + self.decisions.len() + self.values.len()
    }

    /// All arcs: chance-to-chance from CPT parents, decision to its value
    /// node, and hypothesis to every value node.
    pub fn arcs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for n in self.chance.values() {
            for p in &n.cpt.parents {
                out.push((p.clone(), n.name.clone()));
            }
        }
        for v in &self.values {
            out.push((v.decision.clone(), v.name.clone()));
            for h in self.hypotheses() {
                out.push((h.name.clone(), v.name.clone()));
            }
        }
        out.sort();
        out
    }

    /// Chance nodes in a topological order, ties broken by name.
    pub fn topological_order(&self) -> Result<Vec<String>, DiagramError> {
        let mut indegree: BTreeMap<&str, usize> = self.chance.keys().map(|k| (k.as_str(), 0)).collect();
        for n in self.chance.values() {
            for p in &n.cpt.parents {
                if !self.chance.contains_key(p) {
                    return Err(DiagramError::UnknownNode(p.clone()));
                }
            }
            *indegree.get_mut(n.name.as_str()).unwrap() = n.cpt.parents.len();
        }
        let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(k, _)| *k).collect();
        let mut order = Vec::with_capacity(self.chance.len());
        while let Some(n) = ready.pop_first() {
            order.push(n.to_string());
            for c in self.children(n) {
                let d = indegree.get_mut(c.as_str()).unwrap();
                *d -= self.chance[&c].cpt.parents.iter().filter(|p| *p == n).count();
                if *d == 0 {
                    ready.insert(self.chance.get_key_value(&c).unwrap().0.as_str());
                }
            }
        }
        if order.len() < self.chance.len() {
            return Err(DiagramError::Cycle(self.find_cycle()));
        }
        Ok(order)
    }

    fn find_cycle(&self) -> Vec<String> {
        // Depth-first search over parent links; a back edge closes a cycle.
        fn dfs(
            d: &InfluenceDiagram,
            n: &str,
            color: &mut BTreeMap<String, u8>,
            stack: &mut Vec<String>,
        ) -> Option<Vec<String>> {
            color.insert(n.to_string(), 1);
            stack.push(n.to_string());
            for c in d.children(n) {
                match color.get(&c).copied().unwrap_or(0) {
                    0 => {
                        if let Some(cy) = dfs(d, &c, color, stack) {
                            return Some(cy);
                        }
                    }
                    1 => {
                        let at = stack.iter().position(|s| *s == c).unwrap();
                        let mut cy = stack[at..].to_vec();
                        cy.push(c);
                        return Some(cy);
                    }
                    _ => {}
                }
            }
            stack.pop();
            color.insert(n.to_string(), 2);
            None
        }
        let mut color = BTreeMap::new();
        for n in self.chance.keys() {
            if color.get(n).copied().unwrap_or(0) == 0 {
                if let Some(cy) = dfs(self, n, &mut color, &mut Vec::new()) {
                    return cy;
                }
            }
        }
        Vec::new()
    }

    /// Every invariant violation, as text. Empty means valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for n in self.chance.values() {
            if n.states.len() < 2 {
                out.push(format!("{}: fewer than two states", n.name));
            }
            if let Some(norm) = &n.normal {
                if n.state_index(norm).is_none() {
                    out.push(format!("{}: normal state '{norm}' not in state space", n.name));
                }
            }
            if n.is_hypothesis() && n.normal.is_none() {
                out.push(format!("{}: hypothesis without a normal state", n.name));
            }
            if let Err(e) = self.check_cpt(&n.name, &n.cpt) {
                out.push(e.to_string());
            }
        }
        if let Err(DiagramError::Cycle(c)) = self.topological_order() {
            out.push(format!("cycle: {}", c.join(" -> ")));
        }
        for (var, state) in &self.evidence {
            match self.chance.get(var) {
                None => out.push(format!("evidence on unknown node {var}")),
                Some(n) if n.state_index(state).is_none() => out.push(format!("evidence {var}={state} not in state space")),
                _ => {}
            }
        }
        let mut names = BTreeSet::new();
        for name in self.chance.keys().chain(self.decisions.iter().map(|d| &d.name)).chain(self.values.iter().map(|v| &v.name)) {
            if !names.insert(name) {
                out.push(format!("node name {name} used twice"));
            }
        }
        for v in &self.values {
            if !self.decisions.iter().any(|d| d.name == v.decision) {
                out.push(format!("value node {} refers to unknown decision {}", v.name, v.decision));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), DiagramError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(DiagramError::Invalid(v))
        }
    }

    /// Checks that `cpt` fits `node` given the current parent state spaces.
    pub fn check_cpt(&self, node: &str, cpt: &Cpt) -> Result<(), DiagramError> {
        let n = self.node(node)?;
        let arity = |detail: String| DiagramError::CptArity { node: node.to_string(), detail };
        let mut seen = BTreeSet::new();
        for p in &cpt.parents {
            if !self.chance.contains_key(p) {
                return Err(arity(format!("parent {p} is not a chance node")));
            }
            if p == node || !seen.insert(p) {
                return Err(arity(format!("parent {p} is repeated or the node itself")));
            }
        }
        let expected = config_count(&self.cards(&cpt.parents));
        if cpt.rows.len() != expected {
            return Err(arity(format!("{} rows, expected {expected}", cpt.rows.len())));
        }
        for (i, row) in cpt.rows.iter().enumerate() {
            if row.len() != n.states.len() {
                return Err(arity(format!("row {i} has {} entries, expected {}", row.len(), n.states.len())));
            }
        }
        if let Some((i, s)) = cpt.unnormalized_rows(PROB_TOLERANCE).first() {
            return Err(arity(format!("row {i} sums to {s}")));
        }
        Ok(())
    }

    /// Parents, children and the children's other parents of `x`, over chance nodes.
    pub fn markov_boundary(&self, x: &str) -> Result<MarkovBoundary, DiagramError> {
        self.node(x)?;
        let mut members: BTreeSet<String> = self.parents(x).into_iter().collect();
        for c in self.children(x) {
            members.extend(self.parents(&c));
            members.insert(c);
        }
        members.remove(x);
        Ok(MarkovBoundary { center: x.to_string(), members })
    }

    /// Product of CPT entries for a full assignment of the chance nodes.
    pub fn joint_probability(&self, assignment: &BTreeMap<String, String>) -> Result<f64, DiagramError> {
        let mut idx = BTreeMap::new();
        for n in self.chance.values() {
            let s = assignment.get(&n.name).ok_or_else(|| DiagramError::MissingAssignment(n.name.clone()))?;
            let i = n
                .state_index(s)
                .ok_or_else(|| DiagramError::UnknownState { node: n.name.clone(), state: s.clone() })?;
            idx.insert(n.name.as_str(), i);
        }
        let mut p = 1.0;
        for n in self.chance.values() {
            let states: Vec<usize> = n.cpt.parents.iter().map(|q| idx[q.as_str()]).collect();
            let cards = self.cards(&n.cpt.parents);
            p *= n.cpt.rows[config_index(&states, &cards)][idx[n.name.as_str()]];
        }
        Ok(p)
    }

    /// Returns a new diagram with `edit` applied; `self` is left untouched.
    pub fn apply_edit(&self, edit: &DiagramEdit) -> Result<InfluenceDiagram, DiagramError> {
        let mut d = self.clone();
        match edit {
            DiagramEdit::AddChance { node } => {
                if d.kind_of(&node.name).is_some() {
                    return Err(DiagramError::DuplicateNode(node.name.clone()));
                }
                d.chance.insert(node.name.clone(), node.clone());
                d.check_cpt(&node.name, &node.cpt)?;
            }
            DiagramEdit::RemoveChance { name, cascade, replacements } => {
                d.node(name)?;
                let children = d.children(name);
                if !children.is_empty() && !cascade {
                    return Err(DiagramError::HasChildren { node: name.clone(), children });
                }
                d.chance.remove(name);
                d.evidence.remove(name);
                for c in &children {
                    let cpt = replacements.get(c).ok_or_else(|| DiagramError::MissingReplacement(c.clone()))?;
                    d.chance.get_mut(c).unwrap().cpt = cpt.clone();
                    d.check_cpt(c, cpt)?;
                }
            }
            DiagramEdit::AddArc { from, to, cpt } | DiagramEdit::RemoveArc { from, to, cpt } => {
                d.node(from)?;
                d.node(to)?;
                let adding = matches!(edit, DiagramEdit::AddArc { .. });
                let has = d.parents(to).contains(from);
                if adding == has {
                    return Err(DiagramError::CptArity {
                        node: to.clone(),
                        detail: format!("arc {from} -> {to} {}", if adding { "already present" } else { "absent" }),
                    });
                }
                if adding != cpt.parents.contains(from) {
                    return Err(DiagramError::CptArity {
                        node: to.clone(),
                        detail: "replacement table does not reflect the arc change".to_string(),
                    });
                }
                d.chance.get_mut(to).unwrap().cpt = Cpt::new(cpt.parents.clone(), cpt.rows.clone());
                if adding {
                    if let Err(DiagramError::Cycle(c)) = d.topological_order() {
                        return Err(DiagramError::Cycle(c));
                    }
                }
                d.check_cpt(to, cpt)?;
            }
            DiagramEdit::SetCpt { node, cpt } => {
                d.node(node)?;
                d.chance.get_mut(node).unwrap().cpt = cpt.clone();
                if let Err(DiagramError::Cycle(c)) = d.topological_order() {
                    return Err(DiagramError::Cycle(c));
                }
                d.check_cpt(node, cpt)?;
            }
            DiagramEdit::SetEvidence { node, state } => {
                let n = d.node(node)?;
                match state {
                    Some(s) => {
                        if n.state_index(s).is_none() {
                            return Err(DiagramError::UnknownState { node: node.clone(), state: s.clone() });
                        }
                        d.evidence.insert(node.clone(), s.clone());
                    }
                    None => {
                        d.evidence.remove(node);
                    }
                }
            }
        }
        d.validate()?;
        Ok(d)
    }

    /// Deterministic DOT rendering: chance nodes as ellipses, decisions as
    /// boxes, value nodes as diamonds; observed nodes carry their state.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph influence {\n  rankdir=LR;\n");
        for n in self.chance.values() {
            let label = match self.evidence.get(&n.name) {
                Some(s) => format!("{}\\n= {}", n.name, s),
                None => n.name.clone(),
            };
            let style = if self.evidence.contains_key(&n.name) { ", style=filled, fillcolor=lightgrey" } else { "" };
            let _ = writeln!(out, "  \"{}\" [shape=ellipse, label=\"{}\"{}];", n.name, label, style);
        }
        for d in &self.decisions {
            let label = match &d.chosen {
                Some(c) => format!("{}\\n= {}", d.name, c),
                None => d.name.clone(),
            };
            let _ = writeln!(out, "  \"{}\" [shape=box, label=\"{}\"];", d.name, label);
        }
        for v in &self.values {
            let _ = writeln!(out, "  \"{}\" [shape=diamond];", v.name);
        }
        for (a, b) in self.arcs() {
            let _ = writeln!(out, "  \"{a}\" -> \"{b}\";");
        }
        out.push_str("}\n");
        out
    }

    pub fn snapshot(&self) -> DiagramSnapshot {
        let mut nodes = Vec::new();
        for n in self.chance.values() {
            nodes.push(SnapshotNode {
                name: n.name.clone(),
                kind: NodeKind::Chance,
                role: Some(n.role),
                states: n.states.clone(),
                evidence: self.evidence.get(&n.name).cloned(),
                cpt_time: Some(n.time.clone()),
                variant: n.variant.clone(),
            });
        }
        for d in &self.decisions {
            nodes.push(SnapshotNode {
                name: d.name.clone(),
                kind: NodeKind::Decision,
                role: None,
                states: d.alternatives.clone(),
                evidence: d.chosen.clone(),
                cpt_time: None,
                variant: None,
            });
        }
        for v in &self.values {
            nodes.push(SnapshotNode {
                name: v.name.clone(),
                kind: NodeKind::Value,
                role: None,
                states: Vec::new(),
                evidence: None,
                cpt_time: None,
                variant: None,
            });
        }
        DiagramSnapshot { time: self.time.clone(), nodes, arcs: self.arcs(), evidence: self.evidence.clone() }
    }
}

/// Node/arc/evidence view of a diagram for clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagramSnapshot {
    pub time: String,
    pub nodes: Vec<SnapshotNode>,
    pub arcs: Vec<(String, String)>,
    pub evidence: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotNode {
    pub name: String,
    pub kind: NodeKind,
    pub role: Option<Role>,
    /// States for chance nodes, alternatives for decision nodes.
    pub states: Vec<String>,
    /// Observed state, or the chosen alternative of a decision.
    pub evidence: Option<String>,
    pub cpt_time: Option<String>,
    pub variant: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(name: &str, parents: &[&str], rows: Vec<Vec<f64>>) -> ChanceNode {
        ChanceNode {
            name: name.to_string(),
            states: vec!["f".into(), "t".into()],
            role: Role::Observable,
            normal: None,
            cpt: Cpt::new(parents.iter().map(|s| s.to_string()).collect(), rows),
            time: "t1".into(),
            variant: None,
        }
    }

    fn chain() -> InfluenceDiagram {
        let mut d = InfluenceDiagram::new("t1");
        for n in [
            node("A", &[], vec![vec![0.7, 0.3]]),
            node("B", &["A"], vec![vec![0.9, 0.1], vec![0.2, 0.8]]),
            node("C", &["B"], vec![vec![0.6, 0.4], vec![0.5, 0.5]]),
        ] {
            d.chance.insert(n.name.clone(), n);
        }
        d
    }

    #[test]
    fn chain_boundary_has_no_coparents() {
        let d = chain();
        let mb = d.markov_boundary("B").unwrap();
        assert_eq!(mb.members, BTreeSet::from(["A".to_string(), "C".to_string()]));
    }

    #[test]
    fn isolated_node_boundary_is_empty() {
        let mut d = InfluenceDiagram::new("t1");
        d.chance.insert("X".into(), node("X", &[], vec![vec![0.5, 0.5]]));
        assert!(d.markov_boundary("X").unwrap().members.is_empty());
    }

    #[test]
    fn independent_product() {
        let mut d = InfluenceDiagram::new("t1");
        d.chance.insert("X".into(), node("X", &[], vec![vec![0.7, 0.3]]));
        d.chance.insert("Y".into(), node("Y", &[], vec![vec![0.4, 0.6]]));
        let a = BTreeMap::from([("X".to_string(), "t".to_string()), ("Y".to_string(), "t".to_string())]);
        assert!((d.joint_probability(&a).unwrap() - 0.18).abs() < 1e-12);
    }

    #[test]
    fn add_arc_cycle_is_rejected() {
        let d = chain();
        let cpt = Cpt::new(vec!["C".into()], vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        let err = d.apply_edit(&DiagramEdit::AddArc { from: "C".into(), to: "A".into(), cpt }).unwrap_err();
        match err {
            DiagramError::Cycle(c) => assert_eq!(c.first(), c.last()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn set_evidence_adds_one_entry() {
        let d = chain();
        let e = d.apply_edit(&DiagramEdit::SetEvidence { node: "C".into(), state: Some("t".into()) }).unwrap();
        assert_eq!(e.evidence.len(), 1);
        assert_eq!(e.chance, d.chance);
        assert!(d.evidence.is_empty());
    }

    #[test]
    fn remove_with_children_needs_cascade() {
        let d = chain();
        let edit = DiagramEdit::RemoveChance { name: "B".into(), cascade: false, replacements: BTreeMap::new() };
        assert!(matches!(d.apply_edit(&edit), Err(DiagramError::HasChildren { .. })));
        let edit = DiagramEdit::RemoveChance {
            name: "B".into(),
            cascade: true,
            replacements: BTreeMap::from([("C".to_string(), Cpt::prior(vec![0.55, 0.45]))]),
        };
        let e = d.apply_edit(&edit).unwrap();
        assert_eq!(e.chance.len(), 2);
        assert!(e.chance["C"].cpt.is_root());
    }

    #[test]
    fn dot_is_sorted_and_typed() {
        let d = chain().apply_edit(&DiagramEdit::SetEvidence { node: "C".into(), state: Some("t".into()) }).unwrap();
        let dot = d.to_dot();
        assert!(dot.contains("\"C\" [shape=ellipse, label=\"C\\n= t\""));
        assert!(dot.find("\"A\" -> \"B\"").unwrap() < dot.find("\"B\" -> \"C\"").unwrap());
    }
}
