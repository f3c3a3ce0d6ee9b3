//! Knowledge base: variables, causal arcs, time-indexed probability tables,
//! utilities, trigger rules and granularity maps.

mod parse;
mod serialize;
mod trace;
mod triggers;
mod validate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpt::Cpt;

pub use parse::parse_kb;
pub use trace::{justification_trace, JustificationArc, JustificationGraph};
pub use triggers::{match_triggers, Event, Firing};
pub use validate::{validate_kb, Violation, ViolationKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Hypothesis,
    Observable,
    Intermediate,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Hypothesis => "hypothesis",
            Role::Observable => "observable",
            Role::Intermediate => "intermediate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub states: Vec<String>,
    pub role: Role,
    pub normal: Option<String>,
}

impl Variable {
    pub fn state_index(&self, state: &str) -> Option<usize> {
        self.states.iter().position(|s| s == state)
    }
}

/// Ordered, finite set of discrete time labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub labels: Vec<String>,
}

impl TimeAxis {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Self {
        Self { labels: labels.into_iter().map(Into::into).collect() }
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.position(label).is_some()
    }

    /// Labels within `radius` positions of `center`, in axis order.
    pub fn window(&self, center: &str, radius: usize) -> Vec<String> {
        match self.position(center) {
            None => Vec::new(),
            Some(c) => {
                let lo = c.saturating_sub(radius);
                let hi = (c + radius).min(self.labels.len().saturating_sub(1));
                self.labels[lo..=hi].to_vec()
            }
        }
    }
}

/// Key of a bank entry: variable, time label and optional variant tag.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CptKey {
    pub var: String,
    pub time: String,
    pub variant: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CptBank {
    pub entries: BTreeMap<CptKey, Cpt>,
}

/// A bank lookup result: the table plus the time label it was authored at.
#[derive(Clone, Debug, PartialEq)]
pub struct BankHit<'a> {
    pub cpt: &'a Cpt,
    pub authored_at: String,
}

impl CptBank {
    pub fn insert(&mut self, var: &str, time: &str, variant: Option<&str>, cpt: Cpt) -> Option<Cpt> {
        self.entries.insert(
            CptKey { var: var.to_string(), time: time.to_string(), variant: variant.map(str::to_string) },
            cpt,
        )
    }

    /// Entry at the greatest time index not after `time` (piecewise-constant in time).
    pub fn lookup<'a>(
        &'a self,
        axis: &TimeAxis,
        var: &str,
        time: &str,
        variant: Option<&str>,
    ) -> Option<BankHit<'a>> {
        let pos = axis.position(time)?;
        axis.labels[..=pos].iter().rev().find_map(|label| {
            let key = CptKey {
                var: var.to_string(),
                time: label.clone(),
                variant: variant.map(str::to_string),
            };
            self.entries.get(&key).map(|cpt| BankHit { cpt, authored_at: label.clone() })
        })
    }

    pub fn variants_of(&self, var: &str) -> BTreeSet<String> {
        self.entries.keys().filter(|k| k.var == var).filter_map(|k| k.variant.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiteralUtility {
    pub treatment: String,
    pub var: String,
    pub state: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverrideUtility {
    pub treatment: String,
    /// Named literals; hypothesis variables not named are at their normal state.
    pub assignment: Vec<(String, String)>,
    pub value: f64,
}

/// Utility of a treatment given a diagnosis.
///
/// Lookup order: the first override entry (declaration order) matching the
/// diagnosis wins; otherwise the value is the sum of literal entries over the
/// diagnosis' abnormal literals, missing literals counting as zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilityTable {
    pub literal_entries: Vec<LiteralUtility>,
    pub override_entries: Vec<OverrideUtility>,
    /// Normal state of every hypothesis variable the table may refer to.
    pub normals: BTreeMap<String, String>,
}

impl UtilityTable {
    fn is_abnormal(&self, var: &str, state: &str) -> bool {
        self.normals.get(var).is_some_and(|n| n != state)
    }

    fn override_matches(&self, entry: &OverrideUtility, assignment: &BTreeMap<String, String>) -> bool {
        let named_ok = entry.assignment.iter().all(|(v, s)| {
            let actual = assignment.get(v).or_else(|| self.normals.get(v));
            actual.is_some_and(|a| a == s)
        });
        named_ok
            && assignment.iter().all(|(v, s)| {
                entry.assignment.iter().any(|(ev, _)| ev == v) || !self.is_abnormal(v, s)
            })
    }

    /// μ(D, T) for a hypothesis assignment `D`.
    pub fn value(&self, treatment: &str, assignment: &BTreeMap<String, String>) -> f64 {
        if let Some(o) = self
            .override_entries
            .iter()
            .filter(|o| o.treatment == treatment)
            .find(|o| self.override_matches(o, assignment))
        {
            return o.value;
        }
        self.literal_entries
            .iter()
            .filter(|l| l.treatment == treatment)
            .filter(|l| assignment.get(&l.var).is_some_and(|s| *s == l.state) && self.is_abnormal(&l.var, &l.state))
            .map(|l| l.value)
            .sum()
    }

    /// μ(x, T) for a single literal, as used by the per-literal expected utility.
    pub fn literal_value(&self, treatment: &str, var: &str, state: &str) -> f64 {
        if !self.is_abnormal(var, state) {
            return 0.0;
        }
        self.literal_entries
            .iter()
            .filter(|l| l.treatment == treatment && l.var == var && l.state == state)
            .map(|l| l.value)
            .sum()
    }

    pub fn has_overrides(&self, treatment: &str) -> bool {
        self.override_entries.iter().any(|o| o.treatment == treatment)
    }

    /// Variables referenced by any entry of `treatment`.
    pub fn touched_vars(&self, treatment: &str) -> BTreeSet<String> {
        let lits = self.literal_entries.iter().filter(|l| l.treatment == treatment).map(|l| l.var.clone());
        let ovs = self
            .override_entries
            .iter()
            .filter(|o| o.treatment == treatment)
            .flat_map(|o| o.assignment.iter().map(|(v, _)| v.clone()));
        lits.chain(ovs).collect()
    }

    pub fn mentions(&self, treatment: &str) -> bool {
        self.literal_entries.iter().any(|l| l.treatment == treatment)
            || self.override_entries.iter().any(|o| o.treatment == treatment)
    }

    /// Copy restricted to the given treatments.
    pub fn restricted_to(&self, treatments: &[String]) -> UtilityTable {
        let keep = |t: &String| treatments.contains(t);
        UtilityTable {
            literal_entries: self.literal_entries.iter().filter(|l| keep(&l.treatment)).cloned().collect(),
            override_entries: self.override_entries.iter().filter(|o| keep(&o.treatment)).cloned().collect(),
            normals: self.normals.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TreatmentKind {
    Treatment,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Treatment {
    pub name: String,
    pub kind: TreatmentKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerStep {
    pub var: String,
    pub state: String,
    /// Maximum gap in time-axis positions from the previous matched event.
    pub within: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TriggerEffect {
    Variant { var: String, tag: String },
    Include { var: String },
}

impl TriggerEffect {
    pub fn var(&self) -> &str {
        match self {
            TriggerEffect::Variant { var, .. } | TriggerEffect::Include { var } => var,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerRule {
    pub name: String,
    pub pattern: Vec<TriggerStep>,
    pub effect: TriggerEffect,
}

/// A named split of some states of a variable into finer values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineTemplate {
    pub name: String,
    pub var: String,
    /// (state, [(new value, weight)]) for each split state.
    pub splits: Vec<(String, Vec<(String, f64)>)>,
}

/// A named merge of groups of states into coarser values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarsenTemplate {
    pub name: String,
    pub var: String,
    /// (new value, merged states).
    pub merges: Vec<(String, Vec<String>)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub variables: Vec<Variable>,
    pub arcs: Vec<(String, String)>,
    pub time_axis: TimeAxis,
    pub cpt_bank: CptBank,
    pub treatments: Vec<Treatment>,
    pub utilities: UtilityTable,
    pub triggers: Vec<TriggerRule>,
    pub refinements: Vec<RefineTemplate>,
    pub coarsenings: Vec<CoarsenTemplate>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KbError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("line {line}: reference to undeclared {what} '{name}'")]
    Undeclared { line: usize, what: &'static str, name: String },
    #[error("line {line}: duplicate declaration of {what} '{name}'")]
    Duplicate { line: usize, what: &'static str, name: String },
    #[error("knowledge base is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("unknown variable '{0}'")]
    UnknownVariable(String),
    #[error("unknown state '{state}' for variable '{var}'")]
    UnknownState { var: String, state: String },
    #[error("event log is not ordered by time at position {0}")]
    UnorderedLog(usize),
    #[error("unknown time index '{0}'")]
    UnknownTime(String),
}

impl KnowledgeBase {
    pub fn variable(&self, name: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn treatment(&self, name: &str) -> Option<&Treatment> {
        self.treatments.iter().find(|t| t.name == name)
    }

    pub fn treatment_names(&self) -> Vec<String> {
        self.treatments.iter().map(|t| t.name.clone()).collect()
    }

    /// KB parents of `var`, in arc declaration order. Arcs with an undeclared
    /// endpoint are ignored.
    pub fn parents(&self, var: &str) -> Vec<String> {
        self.arcs
            .iter()
            .filter(|(c, e)| e == var && self.variable(c).is_some())
            .map(|(c, _)| c.clone())
            .collect()
    }

    pub fn children(&self, var: &str) -> Vec<String> {
        self.arcs
            .iter()
            .filter(|(c, e)| c == var && self.variable(e).is_some())
            .map(|(_, e)| e.clone())
            .collect()
    }

    /// All proper ancestors of `var`.
    pub fn ancestors(&self, var: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack = self.parents(var);
        while let Some(p) = stack.pop() {
            if seen.insert(p.clone()) {
                stack.extend(self.parents(&p));
            }
        }
        seen
    }

    pub fn hypotheses(&self) -> impl Iterator<Item = &Variable> {
        self.variables.iter().filter(|v| v.role == Role::Hypothesis)
    }

    pub fn refinement(&self, name: &str) -> Option<&RefineTemplate> {
        self.refinements.iter().find(|r| r.name == name)
    }

    pub fn coarsening(&self, name: &str) -> Option<&CoarsenTemplate> {
        self.coarsenings.iter().find(|c| c.name == name)
    }

    /// Text rendering in the knowledge-base format accepted by [`parse_kb`].
    pub fn to_text(&self) -> String {
        serialize::to_text(self)
    }

    pub(crate) fn normals(&self) -> BTreeMap<String, String> {
        self.variables
            .iter()
            .filter_map(|v| v.normal.clone().map(|n| (v.name.clone(), n)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> UtilityTable {
        let mut normals = BTreeMap::new();
        normals.insert("DC".to_string(), "ok".to_string());
        normals.insert("ALT".to_string(), "ok".to_string());
        UtilityTable {
            literal_entries: vec![
                LiteralUtility { treatment: "R".into(), var: "DC".into(), state: "bad".into(), value: 10.0 },
                LiteralUtility { treatment: "R".into(), var: "ALT".into(), state: "bad".into(), value: 3.0 },
            ],
            override_entries: vec![OverrideUtility {
                treatment: "R".into(),
                assignment: vec![("DC".into(), "bad".into()), ("ALT".into(), "bad".into())],
                value: 1.0,
            }],
            normals,
        }
    }

    fn assign(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn override_takes_precedence() {
        let t = table();
        assert_eq!(t.value("R", &assign(&[("DC", "bad"), ("ALT", "bad")])), 1.0);
        assert_eq!(t.value("R", &assign(&[("DC", "bad"), ("ALT", "ok")])), 10.0);
        assert_eq!(t.value("R", &assign(&[("DC", "ok"), ("ALT", "ok")])), 0.0);
        assert_eq!(t.value("other", &assign(&[("DC", "bad")])), 0.0);
    }

    #[test]
    fn override_treats_unnamed_variables_as_normal() {
        let mut t = table();
        t.normals.insert("X".into(), "no".into());
        // X abnormal: the DC/ALT override no longer describes this diagnosis.
        let d = assign(&[("DC", "bad"), ("ALT", "bad"), ("X", "yes")]);
        assert_eq!(t.value("R", &d), 13.0);
        // Override names ALT but the diagnosis does not carry it: absent means normal.
        let d = assign(&[("DC", "bad")]);
        assert_eq!(t.value("R", &d), 10.0);
    }

    #[test]
    fn bank_lookup_is_piecewise_constant() {
        let axis = TimeAxis::new(["t1", "t2", "t3"]);
        let mut bank = CptBank::default();
        bank.insert("X", "t1", None, Cpt::prior(vec![0.5, 0.5]));
        bank.insert("X", "t3", None, Cpt::prior(vec![0.1, 0.9]));
        assert_eq!(bank.lookup(&axis, "X", "t2", None).unwrap().authored_at, "t1");
        assert_eq!(bank.lookup(&axis, "X", "t3", None).unwrap().cpt.rows[0], vec![0.1, 0.9]);
        assert!(bank.lookup(&axis, "X", "t2", Some("v")).is_none());
        assert!(bank.lookup(&axis, "X", "t9", None).is_none());
    }

    #[test]
    fn window_clips_to_axis() {
        let axis = TimeAxis::new(["t1", "t2", "t3", "t4"]);
        assert_eq!(axis.window("t1", 2), vec!["t1", "t2", "t3"]);
        assert_eq!(axis.window("t4", 1), vec!["t3", "t4"]);
    }
}
