//! Building a task-specific influence diagram from the knowledge base.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagram::{ChanceNode, DecisionNode, DiagramError, InfluenceDiagram, ValueNode};
use crate::kb::{match_triggers, Event, Firing, KbError, KnowledgeBase, Role, TreatmentKind, TriggerEffect};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstructError {
    #[error("no observations: construction needs at least one")]
    NoObservations,
    #[error("'{0}' is a hypothesis and cannot be observed directly")]
    NotObservable(String),
    #[error("unknown time index '{0}'")]
    UnknownTime(String),
    #[error("no treatment has a utility touching the included hypotheses")]
    NoTreatments,
    #[error("no table for '{var}' at or before {time}")]
    BankGap { var: String, time: String },
    #[error("trigger selects variant '{tag}' of '{var}', which has no table at or before {time}")]
    UnknownVariant { var: String, tag: String, time: String },
    #[error("'{0}' is not a hypothesis variable")]
    NotHypothesis(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Diagram(#[from] DiagramError),
}

/// Observations in arrival order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub events: Vec<Event>,
}

impl ObservationSet {
    pub fn new(events: Vec<Event>) -> Self {
        Self { events }
    }

    /// Shorthand: all observations at one time, in the given order.
    pub fn at(time: &str, literals: &[(&str, &str)]) -> Self {
        Self { events: literals.iter().map(|(v, s)| Event::new(time, v, s)).collect() }
    }

    /// Latest state per observed variable.
    pub fn as_evidence(&self) -> BTreeMap<String, String> {
        self.events.iter().map(|e| (e.var.clone(), e.state.clone())).collect()
    }

    pub fn variables(&self) -> BTreeSet<String> {
        self.events.iter().map(|e| e.var.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InclusionReason {
    Observed,
    AncestorOfObserved,
    TriggerInclude,
    Required,
    AncestorOfIncluded,
    DescendantBridge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CptReason {
    Default,
    /// Variant chosen by a single-event trigger.
    Trigger,
    /// Variant chosen by a trigger over a sequence of events.
    History,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTrace {
    pub node: String,
    pub included: InclusionReason,
    pub cpt: CptReason,
    /// Time label of the bank entry used.
    pub cpt_time: String,
    pub variant: Option<String>,
    pub rule: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionTrace {
    pub time: String,
    pub nodes: Vec<NodeTrace>,
    pub firings: Vec<Firing>,
    pub treatments: Vec<String>,
}

/// Variant chosen for a variable by the trigger firings.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct VariantChoice {
    pub tag: String,
    pub rule: String,
    pub temporal: bool,
}

/// Variant selections implied by `firings`. When several rules target one
/// variable, the firing that completes last wins; equal completions go to the
/// rule declared later.
pub(crate) fn variant_choices(kb: &KnowledgeBase, firings: &[Firing]) -> BTreeMap<String, VariantChoice> {
    let mut best: BTreeMap<String, (usize, usize, VariantChoice)> = BTreeMap::new();
    for f in firings {
        let Some((order, rule)) = kb.triggers.iter().enumerate().find(|(_, r)| r.name == f.rule) else { continue };
        if let TriggerEffect::Variant { var, tag } = &rule.effect {
            let choice = VariantChoice { tag: tag.clone(), rule: rule.name.clone(), temporal: rule.pattern.len() > 1 };
            let key = (f.end, order);
            match best.get(var) {
                Some((e, o, _)) if (*e, *o) >= key => {}
                _ => {
                    best.insert(var.clone(), (f.end, order, choice));
                }
            }
        }
    }
    best.into_iter().map(|(k, (_, _, c))| (k, c)).collect()
}

pub(crate) fn included_by_triggers(kb: &KnowledgeBase, firings: &[Firing]) -> BTreeSet<String> {
    firings
        .iter()
        .filter_map(|f| kb.triggers.iter().find(|r| r.name == f.rule))
        .filter_map(|r| match &r.effect {
            TriggerEffect::Include { var } => Some(var.clone()),
            TriggerEffect::Variant { .. } => None,
        })
        .collect()
}

/// Node selection: observed variables and their ancestors, must-include
/// hypotheses and their ancestors, and children of must-include hypotheses
/// that share a parent with the selection (with their ancestors).
pub(crate) fn select_nodes(
    kb: &KnowledgeBase,
    observed: &BTreeSet<String>,
    triggered: &BTreeSet<String>,
    required: &BTreeSet<String>,
) -> BTreeMap<String, InclusionReason> {
    let mut sel: BTreeMap<String, InclusionReason> = BTreeMap::new();
    let add = |sel: &mut BTreeMap<String, InclusionReason>, v: &str, r: InclusionReason| {
        sel.entry(v.to_string()).and_modify(|old| *old = (*old).min(r)).or_insert(r);
    };
    for o in observed {
        add(&mut sel, o, InclusionReason::Observed);
        for a in kb.ancestors(o) {
            add(&mut sel, &a, InclusionReason::AncestorOfObserved);
        }
    }
    let must: BTreeSet<&String> = triggered.iter().chain(required).collect();
    for h in &must {
        let reason = if triggered.contains(*h) { InclusionReason::TriggerInclude } else { InclusionReason::Required };
        add(&mut sel, h, reason);
        for a in kb.ancestors(h) {
            add(&mut sel, &a, InclusionReason::AncestorOfIncluded);
        }
    }
    loop {
        let mut grew = false;
        for h in &must {
            for c in kb.children(h) {
                if sel.contains_key(&c) {
                    continue;
                }
                if kb.parents(&c).iter().any(|p| p != *h && sel.contains_key(p)) {
                    add(&mut sel, &c, InclusionReason::DescendantBridge);
                    for a in kb.ancestors(&c) {
                        add(&mut sel, &a, InclusionReason::AncestorOfIncluded);
                    }
                    grew = true;
                }
            }
        }
        if !grew {
            break;
        }
    }
    sel
}

/// KB treatments (in KB order) whose utility entries mention one of `hypotheses`.
pub(crate) fn treatments_for(kb: &KnowledgeBase, hypotheses: &BTreeSet<String>) -> Vec<String> {
    kb.treatments
        .iter()
        .filter(|t| kb.utilities.touched_vars(&t.name).iter().any(|v| hypotheses.contains(v)))
        .map(|t| t.name.clone())
        .collect()
}

pub(crate) fn decision_and_value(kb: &KnowledgeBase, index: usize, treatments: &[String]) -> (DecisionNode, ValueNode) {
    let tests = kb
        .treatments
        .iter()
        .filter(|t| t.kind == TreatmentKind::Test && treatments.contains(&t.name))
        .map(|t| t.name.clone())
        .collect();
    let decision = DecisionNode { name: format!("D{index}"), alternatives: treatments.to_vec(), tests, chosen: None };
    let value =
        ValueNode { name: format!("V{index}"), decision: decision.name.clone(), utility: kb.utilities.restricted_to(treatments) };
    (decision, value)
}

/// The bank table for `var` at `time`, honoring a variant choice.
pub(crate) fn table_at(
    kb: &KnowledgeBase,
    var: &str,
    time: &str,
    choice: Option<&VariantChoice>,
) -> Result<(crate::cpt::Cpt, String), ConstructError> {
    match choice {
        Some(c) => kb
            .cpt_bank
            .lookup(&kb.time_axis, var, time, Some(&c.tag))
            .map(|h| (h.cpt.clone(), h.authored_at))
            .ok_or_else(|| ConstructError::UnknownVariant { var: var.to_string(), tag: c.tag.clone(), time: time.to_string() }),
        None => kb
            .cpt_bank
            .lookup(&kb.time_axis, var, time, None)
            .map(|h| (h.cpt.clone(), h.authored_at))
            .ok_or_else(|| ConstructError::BankGap { var: var.to_string(), time: time.to_string() }),
    }
}

pub(crate) fn chance_node(
    kb: &KnowledgeBase,
    var: &str,
    time: &str,
    choice: Option<&VariantChoice>,
) -> Result<ChanceNode, ConstructError> {
    let v = kb.variable(var).ok_or_else(|| KbError::UnknownVariable(var.to_string()))?;
    let (cpt, authored) = table_at(kb, var, time, choice)?;
    Ok(ChanceNode {
        name: v.name.clone(),
        states: v.states.clone(),
        role: v.role,
        normal: v.normal.clone(),
        cpt,
        time: authored,
        variant: choice.map(|c| c.tag.clone()),
    })
}

/// Whether the node still has the KB's granularity, so bank tables apply to it.
pub(crate) fn matches_kb(kb: &KnowledgeBase, d: &InfluenceDiagram, name: &str) -> bool {
    let Some(n) = d.chance.get(name) else { return false };
    let Some(v) = kb.variable(name) else { return false };
    let same_states = |node: &ChanceNode| kb.variable(&node.name).is_some_and(|kv| kv.states == node.states);
    same_states(n)
        && v.states == n.states
        && kb.parents(name) == n.cpt.parents
        && n.cpt.parents.iter().all(|p| d.chance.get(p).is_some_and(same_states))
}

fn check_observations(kb: &KnowledgeBase, o: &ObservationSet) -> Result<Vec<Firing>, ConstructError> {
    let firings = match_triggers(kb, &o.events)?;
    for e in &o.events {
        if kb.variable(&e.var).is_some_and(|v| v.role == Role::Hypothesis) {
            return Err(ConstructError::NotObservable(e.var.clone()));
        }
    }
    Ok(firings)
}

/// Builds the diagram for observations `o` at time `t`.
pub fn instantiate(
    kb: &KnowledgeBase,
    o: &ObservationSet,
    t: &str,
) -> Result<(InfluenceDiagram, ConstructionTrace), ConstructError> {
    instantiate_with(kb, o, t, &BTreeSet::new())
}

/// As [`instantiate`], additionally forcing the `required` hypotheses in.
pub fn instantiate_with(
    kb: &KnowledgeBase,
    o: &ObservationSet,
    t: &str,
    required: &BTreeSet<String>,
) -> Result<(InfluenceDiagram, ConstructionTrace), ConstructError> {
    if !kb.time_axis.contains(t) {
        return Err(ConstructError::UnknownTime(t.to_string()));
    }
    if o.events.is_empty() {
        return Err(ConstructError::NoObservations);
    }
    for r in required {
        if kb.variable(r).map(|v| v.role) != Some(Role::Hypothesis) {
            return Err(ConstructError::NotHypothesis(r.clone()));
        }
    }
    let firings = check_observations(kb, o)?;
    let selection = select_nodes(kb, &o.variables(), &included_by_triggers(kb, &firings), required);
    let hypotheses: BTreeSet<String> = selection
        .keys()
        .filter(|v| kb.variable(v).is_some_and(|x| x.role == Role::Hypothesis))
        .cloned()
        .collect();
    let treatments = treatments_for(kb, &hypotheses);
    if treatments.is_empty() {
        return Err(ConstructError::NoTreatments);
    }

    let mut d = InfluenceDiagram::new(t);
    for var in selection.keys() {
        d.chance.insert(var.clone(), chance_node(kb, var, t, None)?);
    }
    let (dec, val) = decision_and_value(kb, 1, &treatments);
    d.decisions.push(dec);
    d.values.push(val);
    d.evidence = o.as_evidence();
    assign_with_trace(kb, &d, t, &o.events)
}

/// Re-selects every KB-granularity node's table at time `t`: the variant
/// chosen by the log's trigger firings, or the default otherwise.
pub fn assign_probabilities(
    kb: &KnowledgeBase,
    d: &InfluenceDiagram,
    t: &str,
    log: &[Event],
) -> Result<InfluenceDiagram, ConstructError> {
    Ok(assign_with_trace(kb, d, t, log)?.0)
}

pub(crate) fn assign_with_trace(
    kb: &KnowledgeBase,
    d: &InfluenceDiagram,
    t: &str,
    log: &[Event],
) -> Result<(InfluenceDiagram, ConstructionTrace), ConstructError> {
    if !kb.time_axis.contains(t) {
        return Err(ConstructError::UnknownTime(t.to_string()));
    }
    let firings = match_triggers(kb, log)?;
    let choices = variant_choices(kb, &firings);
    let included = inclusion_reasons(kb, d, log, &firings);
    let mut out = d.clone();
    out.time = t.to_string();
    let mut nodes = Vec::new();
    for name in d.chance.keys() {
        let node = out.chance.get_mut(name).unwrap();
        let choice = choices.get(name);
        if matches_kb(kb, d, name) {
            let (cpt, authored) = table_at(kb, name, t, choice)?;
            node.cpt = cpt;
            node.time = authored;
            node.variant = choice.map(|c| c.tag.clone());
        }
        let reason = match (&node.variant, choice) {
            (Some(_), Some(c)) if c.temporal => CptReason::History,
            (Some(_), _) => CptReason::Trigger,
            (None, _) => CptReason::Default,
        };
        nodes.push(NodeTrace {
            node: name.clone(),
            included: included[name],
            cpt: reason,
            cpt_time: node.time.clone(),
            variant: node.variant.clone(),
            rule: choice.filter(|_| node.variant.is_some()).map(|c| c.rule.clone()),
        });
    }
    out.validate()?;
    let treatments = out.current_decision().map(|x| x.alternatives.clone()).unwrap_or_default();
    Ok((out, ConstructionTrace { time: t.to_string(), nodes, firings, treatments }))
}

/// Why each chance node of `d` is present, judged against the observation log.
fn inclusion_reasons(
    kb: &KnowledgeBase,
    d: &InfluenceDiagram,
    log: &[Event],
    firings: &[Firing],
) -> BTreeMap<String, InclusionReason> {
    let observed: BTreeSet<&str> = log.iter().map(|e| e.var.as_str()).collect();
    let observed_ancestors: BTreeSet<String> = observed.iter().flat_map(|o| kb.ancestors(o)).collect();
    let triggered = included_by_triggers(kb, firings);
    let mut out = BTreeMap::new();
    let mut included_hyps = Vec::new();
    for n in d.chance.values() {
        let r = if observed.contains(n.name.as_str()) {
            InclusionReason::Observed
        } else if observed_ancestors.contains(&n.name) {
            InclusionReason::AncestorOfObserved
        } else if triggered.contains(&n.name) {
            InclusionReason::TriggerInclude
        } else if n.is_hypothesis() {
            InclusionReason::Required
        } else {
            continue;
        };
        if matches!(r, InclusionReason::TriggerInclude | InclusionReason::Required) {
            included_hyps.push(n.name.clone());
        }
        out.insert(n.name.clone(), r);
    }
    let included_ancestors: BTreeSet<String> = included_hyps.iter().flat_map(|h| kb.ancestors(h)).collect();
    for n in d.chance.keys() {
        if !out.contains_key(n) {
            let r = if included_ancestors.contains(n) {
                InclusionReason::AncestorOfIncluded
            } else {
                InclusionReason::DescendantBridge
            };
            out.insert(n.clone(), r);
        }
    }
    out
}
