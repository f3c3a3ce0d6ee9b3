//! Exact inference by variable elimination, expected utilities and decision
//! selection.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpt::{config_count, config_states};
use crate::diagram::{DiagramError, InfluenceDiagram};
use crate::equivalence::EquivalencePartition;
use crate::kb::UtilityTable;

/// Largest hypothesis joint enumerated for the per-diagnosis expected utility.
/// Beyond this, only the per-literal form is used.
pub const DIAGNOSIS_CAP: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("evidence has zero probability: {}", fmt_evidence(.0))]
    ZeroProbabilityEvidence(BTreeMap<String, String>),
    #[error("unknown treatment '{0}'")]
    UnknownTreatment(String),
    #[error("diagram has no pending decision with a value node")]
    NotDecisionReady,
    #[error(transparent)]
    Diagram(#[from] DiagramError),
}

fn fmt_evidence(e: &BTreeMap<String, String>) -> String {
    e.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
}

/// A table over a set of variables, mixed-radix with the first variable most
/// significant.
#[derive(Clone, Debug, PartialEq)]
struct Factor {
    vars: Vec<String>,
    cards: Vec<usize>,
    values: Vec<f64>,
}

impl Factor {
    fn from_node(d: &InfluenceDiagram, name: &str) -> Factor {
        let n = &d.chance[name];
        let mut vars = n.cpt.parents.clone();
        vars.push(name.to_string());
        let cards = d.cards(&vars);
        let values = n.cpt.rows.iter().flatten().copied().collect();
        Factor { vars, cards, values }
    }

    fn position(&self, var: &str) -> Option<usize> {
        self.vars.iter().position(|v| v == var)
    }

    /// Fixes `var` to `state` and drops it from the scope.
    fn restrict(&self, var: &str, state: usize) -> Factor {
        let Some(at) = self.position(var) else { return self.clone() };
        let mut vars = self.vars.clone();
        let mut cards = self.cards.clone();
        vars.remove(at);
        cards.remove(at);
        let mut values = Vec::with_capacity(config_count(&cards));
        for (i, v) in self.values.iter().enumerate() {
            if config_states(i, &self.cards)[at] == state {
                values.push(*v);
            }
        }
        Factor { vars, cards, values }
    }

    fn product(&self, other: &Factor) -> Factor {
        let mut vars = self.vars.clone();
        let mut cards = self.cards.clone();
        for (v, c) in other.vars.iter().zip(&other.cards) {
            if !vars.contains(v) {
                vars.push(v.clone());
                cards.push(*c);
            }
        }
        let map_a: Vec<usize> = self.vars.iter().map(|v| vars.iter().position(|w| w == v).unwrap()).collect();
        let map_b: Vec<usize> = other.vars.iter().map(|v| vars.iter().position(|w| w == v).unwrap()).collect();
        let n = config_count(&cards);
        let mut values = Vec::with_capacity(n);
        let mut states = vec![0usize; vars.len()];
        for _ in 0..n {
            let ia = map_a.iter().zip(&self.cards).fold(0, |acc, (&p, &c)| acc * c + states[p]);
            let ib = map_b.iter().zip(&other.cards).fold(0, |acc, (&p, &c)| acc * c + states[p]);
            values.push(self.values[ia] * other.values[ib]);
            for k in (0..states.len()).rev() {
                states[k] += 1;
                if states[k] < cards[k] {
                    break;
                }
                states[k] = 0;
            }
        }
        Factor { vars, cards, values }
    }

    fn sum_out(&self, var: &str) -> Factor {
        let Some(at) = self.position(var) else { return self.clone() };
        let mut vars = self.vars.clone();
        let mut cards = self.cards.clone();
        vars.remove(at);
        cards.remove(at);
        let mut values = vec![0.0; config_count(&cards)];
        for (i, v) in self.values.iter().enumerate() {
            let mut s = config_states(i, &self.cards);
            s.remove(at);
            values[crate::cpt::config_index(&s, &cards)] += v;
        }
        Factor { vars, cards, values }
    }

    /// Same table with variables in the requested order.
    fn reorder(&self, order: &[String]) -> Factor {
        let cards: Vec<usize> = order.iter().map(|v| self.cards[self.position(v).unwrap()]).collect();
        let perm: Vec<usize> = self.vars.iter().map(|v| order.iter().position(|w| w == v).unwrap()).collect();
        let mut values = vec![0.0; self.values.len()];
        for (i, v) in self.values.iter().enumerate() {
            let s = config_states(i, &self.cards);
            let mut t = vec![0; order.len()];
            for (k, &p) in perm.iter().enumerate() {
                t[p] = s[k];
            }
            values[crate::cpt::config_index(&t, &cards)] = *v;
        }
        Factor { vars: order.to_vec(), cards, values }
    }
}

/// A normalized distribution over the joint states of `vars`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub vars: Vec<String>,
    pub states: Vec<Vec<String>>,
    /// Mixed-radix over `vars`, first variable most significant.
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn cards(&self) -> Vec<usize> {
        self.states.iter().map(Vec::len).collect()
    }

    /// Probability of a joint assignment given as state labels in `vars` order.
    pub fn get(&self, assignment: &[&str]) -> Option<f64> {
        let mut idx = Vec::with_capacity(self.vars.len());
        for (s, states) in assignment.iter().zip(&self.states) {
            idx.push(states.iter().position(|x| x == s)?);
        }
        Some(self.probs[crate::cpt::config_index(&idx, &self.cards())])
    }

    /// Marginal of one variable, in state order.
    pub fn marginal(&self, var: &str) -> Option<Vec<f64>> {
        let at = self.vars.iter().position(|v| v == var)?;
        let cards = self.cards();
        let mut out = vec![0.0; cards[at]];
        for (i, p) in self.probs.iter().enumerate() {
            out[config_states(i, &cards)[at]] += p;
        }
        Some(out)
    }

    /// Iterates (assignment as state labels, probability).
    pub fn entries(&self) -> impl Iterator<Item = (BTreeMap<String, String>, f64)> + '_ {
        let cards = self.cards();
        self.probs.iter().enumerate().map(move |(i, p)| {
            let s = config_states(i, &cards);
            let a = self.vars.iter().zip(&s).zip(&self.states).map(|((v, &k), st)| (v.clone(), st[k].clone())).collect();
            (a, *p)
        })
    }
}

/// Elimination order by min-fill, ties broken by variable name.
fn min_fill_order(factors: &[Factor], eliminate: &BTreeSet<String>) -> Vec<String> {
    let mut adj: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for f in factors {
        for a in &f.vars {
            let e = adj.entry(a.clone()).or_default();
            for b in &f.vars {
                if a != b {
                    e.insert(b.clone());
                }
            }
        }
    }
    let mut remaining = eliminate.clone();
    let mut order = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let best = remaining
            .iter()
            .min_by_key(|v| {
                let nb: Vec<&String> = adj.get(*v).map(|s| s.iter().collect()).unwrap_or_default();
                let mut fill = 0usize;
                for (i, a) in nb.iter().enumerate() {
                    for b in &nb[i + 1..] {
                        if !adj[*a].contains(*b) {
                            fill += 1;
                        }
                    }
                }
                fill
            })
            .unwrap()
            .clone();
        let nb: Vec<String> = adj.remove(&best).map(|s| s.into_iter().collect()).unwrap_or_default();
        for a in &nb {
            let e = adj.get_mut(a).unwrap();
            e.remove(&best);
            for b in &nb {
                if a != b {
                    e.insert(b.clone());
                }
            }
        }
        remaining.remove(&best);
        order.push(best);
    }
    order
}

/// Joint posterior of `query` given the diagram's evidence.
pub fn posterior(d: &InfluenceDiagram, query: &[String]) -> Result<Distribution, InferenceError> {
    for q in query {
        d.node(q)?;
    }
    let mut evidence_idx = BTreeMap::new();
    for (v, s) in &d.evidence {
        let n = d.node(v)?;
        let i = n.state_index(s).ok_or_else(|| DiagramError::UnknownState { node: v.clone(), state: s.clone() })?;
        evidence_idx.insert(v.clone(), i);
    }

    // Nodes that are not ancestors of a query or evidence node sum out to 1.
    let mut relevant: BTreeSet<String> = BTreeSet::new();
    let mut stack: Vec<String> = query.iter().chain(d.evidence.keys()).cloned().collect();
    while let Some(n) = stack.pop() {
        if relevant.insert(n.clone()) {
            stack.extend(d.parents(&n));
        }
    }

    let mut factors: Vec<Factor> = relevant
        .iter()
        .map(|n| {
            let mut f = Factor::from_node(d, n);
            for (v, &s) in &evidence_idx {
                f = f.restrict(v, s);
            }
            f
        })
        .collect();

    let query_free: Vec<String> = query.iter().filter(|q| !evidence_idx.contains_key(*q)).cloned().collect();
    let eliminate: BTreeSet<String> =
        relevant.iter().filter(|n| !evidence_idx.contains_key(*n) && !query_free.contains(n)).cloned().collect();

    for var in min_fill_order(&factors, &eliminate) {
        let (with, without): (Vec<Factor>, Vec<Factor>) = factors.into_iter().partition(|f| f.position(&var).is_some());
        factors = without;
        if let Some(first) = with.first() {
            let prod = with[1..].iter().fold(first.clone(), |acc, f| acc.product(f));
            factors.push(prod.sum_out(&var));
        }
    }
    let unit = Factor { vars: Vec::new(), cards: Vec::new(), values: vec![1.0] };
    let joint = factors.iter().fold(unit, |acc, f| acc.product(f));
    let joint = joint.reorder(&query_free);
    let z: f64 = joint.values.iter().sum();
    if z.is_nan() || z <= 0.0 {
        return Err(InferenceError::ZeroProbabilityEvidence(d.evidence.clone()));
    }

    // Expand to the full query, placing observed query nodes at their evidence state.
    let states: Vec<Vec<String>> = query.iter().map(|q| d.chance[q].states.clone()).collect();
    let cards: Vec<usize> = states.iter().map(Vec::len).collect();
    let mut probs = vec![0.0; config_count(&cards)];
    for (i, p) in probs.iter_mut().enumerate() {
        let s = config_states(i, &cards);
        let mut free = Vec::with_capacity(query_free.len());
        let mut consistent = true;
        for (q, &k) in query.iter().zip(&s) {
            match evidence_idx.get(q) {
                Some(&e) => consistent &= e == k,
                None => free.push(k),
            }
        }
        if consistent {
            *p = joint.values[crate::cpt::config_index(&free, &joint.cards)] / z;
        }
    }
    Ok(Distribution { vars: query.to_vec(), states, probs })
}

/// Probability of the diagram's evidence.
pub fn evidence_probability(d: &InfluenceDiagram) -> Result<f64, InferenceError> {
    let mut p = 1.0;
    let mut partial = d.clone();
    partial.evidence.clear();
    // Chain rule over evidence in name order.
    for (v, s) in &d.evidence {
        let dist = posterior(&partial, std::slice::from_ref(v))?;
        p *= dist.get(&[s.as_str()]).unwrap_or(0.0);
        if p == 0.0 {
            return Ok(0.0);
        }
        partial.evidence.insert(v.clone(), s.clone());
    }
    Ok(p)
}

/// An assignment to the hypothesis nodes of a diagram.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Diagnosis {
    pub assignment: BTreeMap<String, String>,
    /// Literals `var=state` whose state is not the normal one.
    pub abnormal: Vec<String>,
}

impl Diagnosis {
    pub fn new(assignment: BTreeMap<String, String>, normals: &BTreeMap<String, String>) -> Self {
        let abnormal = assignment
            .iter()
            .filter(|(v, s)| normals.get(*v).is_some_and(|n| n != *s))
            .map(|(v, s)| format!("{v}={s}"))
            .collect();
        Self { assignment, abnormal }
    }

    /// `normal` for the all-normal diagnosis, otherwise the abnormal literals.
    pub fn label(&self) -> String {
        if self.abnormal.is_empty() {
            "normal".to_string()
        } else {
            self.abnormal.join(",")
        }
    }
}

fn normals(d: &InfluenceDiagram) -> BTreeMap<String, String> {
    d.hypotheses().iter().filter_map(|n| n.normal.clone().map(|s| (n.name.clone(), s))).collect()
}

fn hypothesis_space(d: &InfluenceDiagram) -> usize {
    d.hypotheses().iter().fold(1usize, |acc, n| acc.saturating_mul(n.states.len()))
}

/// All diagnoses over the diagram's hypothesis nodes, in mixed-radix order
/// (hypotheses by name, states in declaration order).
pub fn diagnoses(d: &InfluenceDiagram) -> Vec<Diagnosis> {
    let hyps = d.hypotheses();
    let cards: Vec<usize> = hyps.iter().map(|h| h.states.len()).collect();
    let norms = normals(d);
    (0..config_count(&cards))
        .map(|i| {
            let s = config_states(i, &cards);
            let a = hyps.iter().zip(&s).map(|(h, &k)| (h.name.clone(), h.states[k].clone())).collect();
            Diagnosis::new(a, &norms)
        })
        .collect()
}

/// Posterior over diagnoses, in the order of [`diagnoses`].
pub fn diagnosis_posterior(d: &InfluenceDiagram) -> Result<Vec<(Diagnosis, f64)>, InferenceError> {
    let dist = posterior(d, &d.hypothesis_names())?;
    Ok(diagnoses(d).into_iter().zip(dist.probs).collect())
}

fn check_treatment(d: &InfluenceDiagram, treatment: &str) -> Result<UtilityTable, InferenceError> {
    let dec = d.current_decision().ok_or(InferenceError::NotDecisionReady)?;
    let value = d.current_value().ok_or(InferenceError::NotDecisionReady)?;
    if !dec.alternatives.iter().any(|a| a == treatment) {
        return Err(InferenceError::UnknownTreatment(treatment.to_string()));
    }
    Ok(value.utility.clone())
}

/// Σ_D μ(D,T)·p(D | evidence) over all diagnoses.
pub fn expected_utility_by_diagnosis(d: &InfluenceDiagram, utility: &UtilityTable, treatment: &str) -> Result<f64, InferenceError> {
    Ok(diagnosis_posterior(d)?.iter().map(|(dx, p)| utility.value(treatment, &dx.assignment) * p).sum())
}

/// Σ_x μ(x,T)·p(x | evidence) over hypothesis literals.
pub fn expected_utility_by_literals(d: &InfluenceDiagram, utility: &UtilityTable, treatment: &str) -> Result<f64, InferenceError> {
    let mut total = 0.0;
    for h in d.hypotheses() {
        let marg = posterior(d, std::slice::from_ref(&h.name))?;
        for (k, s) in h.states.iter().enumerate() {
            total += utility.literal_value(treatment, &h.name, s) * marg.probs[k];
        }
    }
    Ok(total)
}

/// Expected utility of `treatment` at the pending decision.
pub fn expected_utility(d: &InfluenceDiagram, treatment: &str) -> Result<f64, InferenceError> {
    let utility = check_treatment(d, treatment)?;
    if hypothesis_space(d) > DIAGNOSIS_CAP {
        expected_utility_by_literals(d, &utility, treatment)
    } else {
        expected_utility_by_diagnosis(d, &utility, treatment)
    }
}

/// Expected utility of every alternative of the pending decision, sharing one
/// posterior computation.
pub fn expected_utilities(d: &InfluenceDiagram) -> Result<BTreeMap<String, f64>, InferenceError> {
    let dec = d.current_decision().ok_or(InferenceError::NotDecisionReady)?;
    let utility = &d.current_value().ok_or(InferenceError::NotDecisionReady)?.utility;
    let mut out = BTreeMap::new();
    if hypothesis_space(d) > DIAGNOSIS_CAP {
        for t in &dec.alternatives {
            out.insert(t.clone(), expected_utility_by_literals(d, utility, t)?);
        }
    } else {
        let post = diagnosis_posterior(d)?;
        for t in &dec.alternatives {
            out.insert(t.clone(), post.iter().map(|(dx, p)| utility.value(t, &dx.assignment) * p).sum());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunnerUp {
    pub treatment: String,
    pub value: f64,
    pub class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisProbability {
    pub diagnosis: String,
    pub assignment: BTreeMap<String, String>,
    pub class: Option<usize>,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionReport {
    pub time: String,
    pub best_treatment: String,
    /// β: the expected utility of the best treatment.
    pub best_value: f64,
    pub best_class: Option<usize>,
    /// Other treatments whose value equals β; the best one won by name order.
    pub tied_with: Vec<String>,
    pub per_treatment: BTreeMap<String, f64>,
    pub runner_up: Option<RunnerUp>,
    /// True when every treatment falls in the class of the best one.
    pub runner_up_absent: bool,
    pub posterior: Vec<DiagnosisProbability>,
}

/// Values closer than this (relative to their magnitude) count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

/// Picks the highest-value treatment from `values`, lexicographic on ties.
/// Returns the winner and the other tied names.
pub fn argmax(values: &BTreeMap<String, f64>) -> Option<(String, f64, Vec<String>)> {
    let max = values.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut top = values.iter().filter(|(_, &v)| tied(v, max)).map(|(k, _)| k.clone());
    let best = top.next()?;
    Some((best.clone(), values[&best], top.collect()))
}

/// Best treatment, its value β, and the best treatment of a different class.
pub fn best_decision(d: &InfluenceDiagram, partition: &EquivalencePartition) -> Result<DecisionReport, InferenceError> {
    let per_treatment = expected_utilities(d)?;
    let (best, beta, tied_with) = argmax(&per_treatment).ok_or(InferenceError::NotDecisionReady)?;
    let best_class = partition.class_of_treatment(&best);
    let others: BTreeMap<String, f64> = per_treatment
        .iter()
        .filter(|(t, _)| {
            let c = partition.class_of_treatment(t);
            best_class.is_none() || c.is_none() || c != best_class
        })
        .filter(|(t, _)| **t != best)
        .map(|(t, v)| (t.clone(), *v))
        .collect();
    let runner_up = argmax(&others).map(|(t, v, _)| RunnerUp { class: partition.class_of_treatment(&t), treatment: t, value: v });
    let posterior = if hypothesis_space(d) > DIAGNOSIS_CAP {
        Vec::new()
    } else {
        diagnosis_posterior(d)?
            .into_iter()
            .map(|(dx, p)| DiagnosisProbability {
                diagnosis: dx.label(),
                class: partition.class_of_diagnosis(&dx),
                assignment: dx.assignment,
                probability: p,
            })
            .collect()
    };
    Ok(DecisionReport {
        time: d.time.clone(),
        best_treatment: best,
        best_value: beta,
        best_class,
        tied_with,
        per_treatment,
        runner_up_absent: runner_up.is_none(),
        runner_up,
        posterior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpt::Cpt;
    use crate::diagram::{ChanceNode, DecisionNode, ValueNode};
    use crate::kb::{LiteralUtility, Role};

    fn binary(name: &str, role: Role, parents: &[&str], rows: Vec<Vec<f64>>) -> ChanceNode {
        ChanceNode {
            name: name.into(),
            states: vec!["ok".into(), "bad".into()],
            role,
            normal: (role == Role::Hypothesis).then(|| "ok".to_string()),
            cpt: Cpt::new(parents.iter().map(|s| s.to_string()).collect(), rows),
            time: "t1".into(),
            variant: None,
        }
    }

    fn single_hypothesis() -> InfluenceDiagram {
        let mut d = InfluenceDiagram::new("t1");
        d.chance.insert("H".into(), binary("H", Role::Hypothesis, &[], vec![vec![0.8, 0.2]]));
        d.decisions.push(DecisionNode { name: "D1".into(), alternatives: vec!["T".into(), "U".into()], tests: vec![], chosen: None });
        let utility = UtilityTable {
            literal_entries: vec![LiteralUtility { treatment: "T".into(), var: "H".into(), state: "bad".into(), value: 10.0 }],
            override_entries: vec![],
            normals: BTreeMap::from([("H".to_string(), "ok".to_string())]),
        };
        d.values.push(ValueNode { name: "V1".into(), decision: "D1".into(), utility });
        d
    }

    #[test]
    fn two_term_expected_utility() {
        let d = single_hypothesis();
        assert!((expected_utility(&d, "T").unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(expected_utility(&d, "U").unwrap(), 0.0);
        assert!(matches!(expected_utility(&d, "X"), Err(InferenceError::UnknownTreatment(_))));
    }

    #[test]
    fn root_marginal_is_prior() {
        let d = single_hypothesis();
        assert_eq!(posterior(&d, &["H".into()]).unwrap().probs, vec![0.8, 0.2]);
    }

    #[test]
    fn deterministic_copy_inverts() {
        let mut d = InfluenceDiagram::new("t1");
        d.chance.insert("A".into(), binary("A", Role::Observable, &[], vec![vec![0.6, 0.4]]));
        d.chance.insert("B".into(), binary("B", Role::Observable, &["A"], vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        d.evidence.insert("B".into(), "bad".into());
        assert_eq!(posterior(&d, &["A".into()]).unwrap().probs, vec![0.0, 1.0]);
        d.chance.get_mut("A").unwrap().cpt = Cpt::prior(vec![1.0, 0.0]);
        assert!(matches!(posterior(&d, &["A".into()]), Err(InferenceError::ZeroProbabilityEvidence(_))));
    }

    #[test]
    fn exact_tie_goes_to_first_name() {
        let values = BTreeMap::from([("b".to_string(), 1.0), ("a".to_string(), 1.0), ("c".to_string(), 0.5)]);
        let (best, v, tied) = argmax(&values).unwrap();
        assert_eq!((best.as_str(), v, tied), ("a", 1.0, vec!["b".to_string()]));
    }

    #[test]
    fn factor_reorder_round_trips() {
        let f = Factor { vars: vec!["a".into(), "b".into()], cards: vec![2, 3], values: (0..6).map(f64::from).collect() };
        let g = f.reorder(&["b".into(), "a".into()]);
        assert_eq!(g.values, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(g.reorder(&["a".into(), "b".into()]), f);
    }
}
