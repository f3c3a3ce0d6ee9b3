//! Model revision: new probability values, state refinement and coarsening,
//! node addition, rebuilding, and the planner choosing among them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::construct::{
    chance_node, decision_and_value, instantiate_with, matches_kb, select_nodes, table_at, treatments_for,
    ConstructError, ObservationSet, VariantChoice,
};
use crate::cpt::{config_count, config_index, configurations, Cpt};
use crate::diagram::{DiagramError, InfluenceDiagram};
use crate::equivalence::EquivalencePartition;
use crate::inference::{best_decision, posterior, DecisionReport, InferenceError};
use crate::kb::{CoarsenTemplate, Event, KnowledgeBase, OverrideUtility, RefineTemplate, Role, UtilityTable};
use crate::sensitivity::{SensitivityReport, Verdict};
use crate::PROB_TOLERANCE;

/// Fraction of touched nodes above which rebuilding beats editing.
pub const REBUILD_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UpdateError {
    #[error("malformed map: {0}")]
    BadMap(String),
    #[error("fragment for '{node}' does not fit: {detail}")]
    FragmentArity { node: String, detail: String },
    #[error("refinement violates distribution preservation at {} configuration(s)", .0.len())]
    Verification(Vec<Eq3Violation>),
    #[error("observed state of '{0}' would be split across several values")]
    EvidenceSplit(String),
    #[error("coarsening loses information and changes the decision from {} to {}", .before.best_treatment, .after.best_treatment)]
    Rejected { before: Box<DecisionReport>, after: Box<DecisionReport> },
    #[error("no knowledge-base template restores the granularity of '{0}'")]
    NoRestoringTemplate(String),
    #[error(transparent)]
    Construct(#[from] ConstructError),
    #[error(transparent)]
    Diagram(#[from] DiagramError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

// ---------------------------------------------------------------- probabilities

/// Replaces the tables of KB-granularity nodes by their entries at `t`,
/// keeping each node's current variant. Topology and evidence are unchanged.
pub fn update_probabilities(d: &InfluenceDiagram, kb: &KnowledgeBase, t: &str) -> Result<InfluenceDiagram, UpdateError> {
    if !kb.time_axis.contains(t) {
        return Err(ConstructError::UnknownTime(t.to_string()).into());
    }
    let mut out = d.clone();
    out.time = t.to_string();
    for (name, node) in out.chance.iter_mut() {
        if !matches_kb(kb, d, name) {
            continue;
        }
        let choice = node.variant.as_ref().map(|tag| VariantChoice { tag: tag.clone(), rule: String::new(), temporal: false });
        let (cpt, authored) = table_at(kb, name, t, choice.as_ref())?;
        node.cpt = cpt;
        node.time = authored;
    }
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------- refinement

/// Split of some states of `target` into finer values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementMap {
    pub target: String,
    /// (state, new values); states not listed keep their name.
    pub splits: Vec<(String, Vec<String>)>,
    /// Share λ of each new value within its source state.
    pub weights: BTreeMap<String, f64>,
    /// Explicit tables replacing the proportional split.
    pub fragments: Option<RefinementFragments>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementFragments {
    /// Table of the target over its new values.
    pub node: Cpt,
    /// Tables of the target's children, conditioned on the new values.
    pub children: BTreeMap<String, Cpt>,
}

impl RefinementMap {
    pub fn from_template(t: &RefineTemplate) -> Self {
        let splits = t.splits.iter().map(|(s, parts)| (s.clone(), parts.iter().map(|(n, _)| n.clone()).collect())).collect();
        let weights = t.splits.iter().flat_map(|(_, parts)| parts.iter().cloned()).collect();
        Self { target: t.var.clone(), splits, weights, fragments: None }
    }

    /// The coarsening that merges every split back into its source state.
    pub fn inverse(&self) -> CoarseningMap {
        CoarseningMap { target: self.target.clone(), merges: self.splits.iter().map(|(s, n)| (s.clone(), n.clone())).collect() }
    }

    fn parts_of(&self, state: &str) -> Option<&Vec<String>> {
        self.splits.iter().find(|(s, _)| s == state).map(|(_, p)| p)
    }
}

/// Where each new value of a refined or coarsened node comes from: the
/// (old state, weight) pairs it stands for.
struct StateMap {
    new_states: Vec<String>,
    sources: Vec<Vec<(usize, f64)>>,
}

fn refined_states(d: &InfluenceDiagram, m: &RefinementMap) -> Result<StateMap, UpdateError> {
    let x = d.node(&m.target)?;
    let mut new_states = Vec::new();
    let mut sources = Vec::new();
    let mut seen = BTreeSet::new();
    for (s, _) in &m.splits {
        if x.state_index(s).is_none() {
            return Err(UpdateError::BadMap(format!("{s} is not a state of {}", m.target)));
        }
    }
    for (i, s) in x.states.iter().enumerate() {
        let parts = match m.parts_of(s) {
            Some(p) if p.is_empty() => return Err(UpdateError::BadMap(format!("{s} is split into nothing"))),
            Some(p) => p.clone(),
            None => vec![s.clone()],
        };
        let single = parts.len() == 1;
        let mut total = 0.0;
        for p in parts {
            let w = if single { m.weights.get(&p).copied().unwrap_or(1.0) } else {
                *m.weights.get(&p).ok_or_else(|| UpdateError::BadMap(format!("no weight for {p}")))?
            };
            if !(w > 0.0 && w <= 1.0) {
                return Err(UpdateError::BadMap(format!("weight of {p} must lie in (0,1]")));
            }
            if !seen.insert(p.clone()) {
                return Err(UpdateError::BadMap(format!("value {p} appears twice")));
            }
            total += w;
            new_states.push(p);
            sources.push(vec![(i, w)]);
        }
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(UpdateError::BadMap(format!("weights for {s} sum to {total}")));
        }
    }
    Ok(StateMap { new_states, sources })
}

/// Rebuilds `child_cpt` for a change of the parent `x`'s states, each new
/// parent state mixing the rows of its sources.
fn remap_parent(d: &InfluenceDiagram, child_cpt: &Cpt, x: &str, map: &StateMap, mix: &[Vec<(usize, f64)>]) -> Cpt {
    let old_cards = d.cards(&child_cpt.parents);
    let k = child_cpt.parent_position(x).unwrap();
    let mut new_cards = old_cards.clone();
    new_cards[k] = map.new_states.len();
    let rows = configurations(&new_cards)
        .map(|cfg| {
            let width = child_cpt.rows[0].len();
            let mut row = vec![0.0; width];
            for &(old, w) in &mix[cfg[k]] {
                let mut old_cfg = cfg.clone();
                old_cfg[k] = old;
                for (r, v) in row.iter_mut().zip(&child_cpt.rows[config_index(&old_cfg, &old_cards)]) {
                    *r += w * v;
                }
            }
            row
        })
        .collect();
    Cpt::new(child_cpt.parents.clone(), rows)
}

/// Proportional split: the target's rows scaled by λ, children's rows copied.
pub fn proportional_fragments(d: &InfluenceDiagram, m: &RefinementMap) -> Result<RefinementFragments, UpdateError> {
    let map = refined_states(d, m)?;
    let x = d.node(&m.target)?;
    let rows = x
        .cpt
        .rows
        .iter()
        .map(|row| map.sources.iter().map(|src| src.iter().map(|&(i, w)| row[i] * w).sum()).collect())
        .collect();
    let node = Cpt::new(x.cpt.parents.clone(), rows);
    let copy: Vec<Vec<(usize, f64)>> = map.sources.iter().map(|src| vec![(src[0].0, 1.0)]).collect();
    let children = d
        .children(&m.target)
        .into_iter()
        .map(|c| {
            let cpt = remap_parent(d, &d.chance[&c].cpt, &m.target, &map, &copy);
            (c, cpt)
        })
        .collect();
    Ok(RefinementFragments { node, children })
}

/// One configuration where the refined tables fail to reproduce the original
/// local distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eq3Violation {
    pub state: String,
    pub parents: BTreeMap<String, String>,
    /// States of the children and their other parents.
    pub context: BTreeMap<String, String>,
    pub residual: f64,
}

fn check_fragment_shapes(d: &InfluenceDiagram, m: &RefinementMap, map: &StateMap, f: &RefinementFragments) -> Result<(), UpdateError> {
    let x = d.node(&m.target)?;
    let bad = |node: &str, detail: String| UpdateError::FragmentArity { node: node.to_string(), detail };
    if f.node.parents != x.cpt.parents {
        return Err(bad(&m.target, "parents differ from the node's".into()));
    }
    if f.node.rows.len() != x.cpt.rows.len() || f.node.rows.iter().any(|r| r.len() != map.new_states.len()) {
        return Err(bad(&m.target, format!("expected {} rows of {} values", x.cpt.rows.len(), map.new_states.len())));
    }
    let children: BTreeSet<String> = d.children(&m.target).into_iter().collect();
    if f.children.keys().cloned().collect::<BTreeSet<_>>() != children {
        return Err(bad(&m.target, "fragments must cover exactly the node's children".into()));
    }
    for (c, cpt) in &f.children {
        let orig = &d.chance[c];
        if cpt.parents != orig.cpt.parents {
            return Err(bad(c, "parents differ from the node's".into()));
        }
        let mut cards = d.cards(&cpt.parents);
        cards[cpt.parent_position(&m.target).unwrap()] = map.new_states.len();
        if cpt.rows.len() != config_count(&cards) || cpt.rows.iter().any(|r| r.len() != orig.states.len()) {
            return Err(bad(c, format!("expected {} rows of {} values", config_count(&cards), orig.states.len())));
        }
    }
    Ok(())
}

/// Checks p(Σ|ω,Π_Σ)·p(ω|π) = Σ_{ω'∈R(ω)} p'(Σ|ω',Π_Σ)·p'(ω'|π) for every
/// state ω, every parent configuration π of positive prior probability, and
/// every configuration of the children Σ and their other parents Π_Σ.
pub fn verify_refinement(
    d: &InfluenceDiagram,
    m: &RefinementMap,
    proposed: &RefinementFragments,
) -> Result<Vec<Eq3Violation>, UpdateError> {
    let map = refined_states(d, m)?;
    check_fragment_shapes(d, m, &map, proposed)?;
    let x = d.node(&m.target)?;
    let parents = x.cpt.parents.clone();
    let children = d.children(&m.target);
    let mut others: Vec<String> = Vec::new();
    for c in &children {
        for p in d.parents(c) {
            if p != m.target && !parents.contains(&p) && !children.contains(&p) && !others.contains(&p) {
                others.push(p);
            }
        }
    }
    let parent_prior = if parents.is_empty() {
        None
    } else {
        let mut prior = d.clone();
        prior.evidence.clear();
        Some(posterior(&prior, &parents)?)
    };

    let context: Vec<String> = children.iter().chain(&others).cloned().collect();
    let pcards = d.cards(&parents);
    let ccards = d.cards(&context);
    let mut violations = Vec::new();
    for (w_idx, w_name) in x.states.iter().enumerate() {
        let refined: Vec<usize> = (0..map.new_states.len()).filter(|&j| map.sources[j][0].0 == w_idx).collect();
        for (pi_idx, pi) in configurations(&pcards).enumerate() {
            if parent_prior.as_ref().is_some_and(|p| p.probs[pi_idx] <= 0.0) {
                continue;
            }
            let mut states: BTreeMap<&str, usize> = parents.iter().map(String::as_str).zip(pi.iter().copied()).collect();
            for ctx in configurations(&ccards) {
                for (name, &s) in context.iter().zip(&ctx) {
                    states.insert(name, s);
                }
                let children_prob = |xstate: usize, tables: &dyn Fn(&str) -> Cpt, xcard: usize| -> f64 {
                    children
                        .iter()
                        .map(|c| {
                            let cpt = tables(c);
                            let mut cards = d.cards(&cpt.parents);
                            let cfg: Vec<usize> = cpt
                                .parents
                                .iter()
                                .map(|p| if *p == m.target { xstate } else { states[p.as_str()] })
                                .collect();
                            cards[cpt.parent_position(&m.target).unwrap()] = xcard;
                            cpt.rows[config_index(&cfg, &cards)][states[c.as_str()]]
                        })
                        .product()
                };
                let lhs = children_prob(w_idx, &|c| d.chance[c].cpt.clone(), x.states.len()) * x.cpt.rows[pi_idx][w_idx];
                let rhs: f64 = refined
                    .iter()
                    .map(|&j| {
                        children_prob(j, &|c| proposed.children[c].clone(), map.new_states.len()) * proposed.node.rows[pi_idx][j]
                    })
                    .sum();
                let residual = lhs - rhs;
                if residual.abs() > PROB_TOLERANCE {
                    let named = |names: &[String], cfg: &[usize]| -> BTreeMap<String, String> {
                        names.iter().zip(cfg).map(|(n, &s)| (n.clone(), d.chance[n].states[s].clone())).collect()
                    };
                    violations.push(Eq3Violation {
                        state: w_name.clone(),
                        parents: named(&parents, &pi),
                        context: named(&context, &ctx),
                        residual,
                    });
                }
            }
        }
    }
    Ok(violations)
}

fn split_utilities(u: &UtilityTable, var: &str, map: &StateMap, old_states: &[String]) -> UtilityTable {
    let mut out = UtilityTable { normals: u.normals.clone(), ..Default::default() };
    let new_of = |old: &str| -> Vec<String> {
        let i = old_states.iter().position(|s| s == old).unwrap();
        map.new_states.iter().zip(&map.sources).filter(|(_, src)| src[0].0 == i).map(|(n, _)| n.clone()).collect()
    };
    for l in &u.literal_entries {
        if l.var == var {
            for n in new_of(&l.state) {
                out.literal_entries.push(crate::kb::LiteralUtility { state: n, ..l.clone() });
            }
        } else {
            out.literal_entries.push(l.clone());
        }
    }
    for o in &u.override_entries {
        match o.assignment.iter().position(|(v, _)| v == var) {
            Some(k) => {
                for n in new_of(&o.assignment[k].1) {
                    let mut e = o.clone();
                    e.assignment[k].1 = n;
                    out.override_entries.push(e);
                }
            }
            None => out.override_entries.push(o.clone()),
        }
    }
    if let Some(norm) = u.normals.get(var) {
        out.normals.insert(var.to_string(), new_of(norm)[0].clone());
    }
    out
}

/// Splits states of the target node. Without explicit fragments the
/// proportional split is used; explicit fragments must pass
/// [`verify_refinement`].
pub fn refine_node(d: &InfluenceDiagram, m: &RefinementMap) -> Result<InfluenceDiagram, UpdateError> {
    let map = refined_states(d, m)?;
    let fragments = match &m.fragments {
        Some(f) => {
            let v = verify_refinement(d, m, f)?;
            if !v.is_empty() {
                return Err(UpdateError::Verification(v));
            }
            f.clone()
        }
        None => proportional_fragments(d, m)?,
    };
    let x = d.node(&m.target)?.clone();
    let mut out = d.clone();
    if let Some(obs) = d.evidence.get(&m.target) {
        let i = x.state_index(obs).unwrap();
        let parts: Vec<&String> = map.new_states.iter().zip(&map.sources).filter(|(_, s)| s[0].0 == i).map(|(n, _)| n).collect();
        if parts.len() > 1 {
            return Err(UpdateError::EvidenceSplit(m.target.clone()));
        }
        out.evidence.insert(m.target.clone(), parts[0].clone());
    }
    let node = out.chance.get_mut(&m.target).unwrap();
    node.states = map.new_states.clone();
    node.cpt = fragments.node.clone();
    if let Some(norm) = &x.normal {
        let i = x.state_index(norm).unwrap();
        node.normal = map.new_states.iter().zip(&map.sources).find(|(_, s)| s[0].0 == i).map(|(n, _)| n.clone());
    }
    for (c, cpt) in &fragments.children {
        out.chance.get_mut(c).unwrap().cpt = cpt.clone();
    }
    if x.role == Role::Hypothesis {
        for v in &mut out.values {
            v.utility = split_utilities(&v.utility, &m.target, &map, &x.states);
        }
    }
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------- coarsening

/// Merge of groups of states of `target` into single values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseningMap {
    pub target: String,
    /// (new value, merged states); states not listed stay as they are.
    pub merges: Vec<(String, Vec<String>)>,
}

impl CoarseningMap {
    pub fn from_template(t: &CoarsenTemplate) -> Self {
        Self { target: t.var.clone(), merges: t.merges.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarsenOutcome {
    pub diagram: InfluenceDiagram,
    /// Some child distribution differed across a merged group.
    pub info_loss: bool,
    /// Groups with zero prior mass, averaged with uniform weights.
    pub uniform_groups: Vec<String>,
    pub before: Option<DecisionReport>,
    pub after: Option<DecisionReport>,
}

fn coarse_groups(d: &InfluenceDiagram, m: &CoarseningMap) -> Result<(Vec<String>, Vec<Vec<usize>>), UpdateError> {
    let x = d.node(&m.target)?;
    let mut group_of: Vec<Option<usize>> = vec![None; x.states.len()];
    for (g, (_, members)) in m.merges.iter().enumerate() {
        if members.is_empty() {
            return Err(UpdateError::BadMap("empty merge group".into()));
        }
        for s in members {
            let i = x.state_index(s).ok_or_else(|| UpdateError::BadMap(format!("{s} is not a state of {}", m.target)))?;
            if group_of[i].is_some() {
                return Err(UpdateError::BadMap(format!("{s} is merged twice")));
            }
            group_of[i] = Some(g);
        }
    }
    let mut names = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut placed: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, s) in x.states.iter().enumerate() {
        match group_of[i] {
            Some(g) => match placed.get(&g) {
                Some(&at) => groups[at].push(i),
                None => {
                    placed.insert(g, names.len());
                    names.push(m.merges[g].0.clone());
                    groups.push(vec![i]);
                }
            },
            None => {
                names.push(s.clone());
                groups.push(vec![i]);
            }
        }
    }
    let unique: BTreeSet<&String> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(UpdateError::BadMap("coarsened value names collide".into()));
    }
    Ok((names, groups))
}

fn merge_utilities(u: &UtilityTable, var: &str, old_states: &[String], names: &[String], mix: &[Vec<(usize, f64)>]) -> UtilityTable {
    let mut out = UtilityTable { normals: u.normals.clone(), ..Default::default() };
    let group_of = |state: &str| -> usize {
        let i = old_states.iter().position(|s| s == state).unwrap();
        mix.iter().position(|m| m.iter().any(|(j, _)| *j == i)).unwrap()
    };
    if let Some(norm) = u.normals.get(var) {
        out.normals.insert(var.to_string(), names[group_of(norm)].clone());
    }
    let treatments: BTreeSet<&String> =
        u.literal_entries.iter().map(|l| &l.treatment).chain(u.override_entries.iter().map(|o| &o.treatment)).collect();
    for l in &u.literal_entries {
        if l.var != var {
            out.literal_entries.push(l.clone());
        }
    }
    for t in &treatments {
        for (g, members) in mix.iter().enumerate() {
            let v: f64 = members.iter().map(|&(i, w)| w * u.literal_value(t, var, &old_states[i])).sum();
            if v != 0.0 {
                out.literal_entries.push(crate::kb::LiteralUtility { treatment: (*t).clone(), var: var.to_string(), state: names[g].clone(), value: v });
            }
        }
    }
    let mut seen = BTreeSet::new();
    for o in &u.override_entries {
        let Some(k) = o.assignment.iter().position(|(v, _)| v == var) else {
            out.override_entries.push(o.clone());
            continue;
        };
        let g = group_of(&o.assignment[k].1);
        let mut rest = o.assignment.clone();
        rest.remove(k);
        if !seen.insert((o.treatment.clone(), rest.clone(), g)) {
            continue;
        }
        // Weighted average of the exact utilities of the merged diagnoses.
        let value: f64 = mix[g]
            .iter()
            .map(|&(i, w)| {
                let mut dx: BTreeMap<String, String> = rest.iter().cloned().collect();
                dx.insert(var.to_string(), old_states[i].clone());
                w * u.value(&o.treatment, &dx)
            })
            .sum();
        let mut assignment = rest;
        assignment.insert(k, (var.to_string(), names[g].clone()));
        out.override_entries.push(OverrideUtility { treatment: o.treatment.clone(), assignment, value });
    }
    out
}

/// Merges groups of states. Children's rows are averaged with the target's
/// prior marginal as weights. If that loses information and the best
/// treatment moves to another class of `partition`, the merge is rejected.
pub fn coarsen_node(d: &InfluenceDiagram, m: &CoarseningMap, partition: &EquivalencePartition) -> Result<CoarsenOutcome, UpdateError> {
    let (names, groups) = coarse_groups(d, m)?;
    let x = d.node(&m.target)?.clone();
    let mut prior_diagram = d.clone();
    prior_diagram.evidence.clear();
    let prior = posterior(&prior_diagram, std::slice::from_ref(&m.target))?.probs;
    let mut uniform_groups = Vec::new();
    let mix: Vec<Vec<(usize, f64)>> = groups
        .iter()
        .zip(&names)
        .map(|(g, name)| {
            let mass: f64 = g.iter().map(|&i| prior[i]).sum();
            if mass > 0.0 {
                g.iter().map(|&i| (i, prior[i] / mass)).collect()
            } else {
                uniform_groups.push(name.clone());
                g.iter().map(|&i| (i, 1.0 / g.len() as f64)).collect()
            }
        })
        .collect();
    let map = StateMap { new_states: names.clone(), sources: mix.clone() };

    let mut out = d.clone();
    let mut info_loss = false;
    for c in d.children(&m.target) {
        let cpt = &d.chance[&c].cpt;
        let cards = d.cards(&cpt.parents);
        let k = cpt.parent_position(&m.target).unwrap();
        for cfg in configurations(&cards) {
            let row = &cpt.rows[config_index(&cfg, &cards)];
            let g = groups.iter().find(|g| g.contains(&cfg[k])).unwrap();
            let mut first = cfg.clone();
            first[k] = g[0];
            let base = &cpt.rows[config_index(&first, &cards)];
            if row.iter().zip(base).any(|(a, b)| (a - b).abs() > PROB_TOLERANCE) {
                info_loss = true;
            }
        }
        out.chance.get_mut(&c).unwrap().cpt = remap_parent(d, cpt, &m.target, &map, &mix);
    }
    let rows = x.cpt.rows.iter().map(|row| groups.iter().map(|g| g.iter().map(|&i| row[i]).sum()).collect()).collect();
    let node = out.chance.get_mut(&m.target).unwrap();
    node.cpt = Cpt::new(x.cpt.parents.clone(), rows);
    node.states = names.clone();
    if let Some(norm) = &x.normal {
        let i = x.state_index(norm).unwrap();
        node.normal = groups.iter().position(|g| g.contains(&i)).map(|g| names[g].clone());
    }
    if let Some(obs) = d.evidence.get(&m.target) {
        let i = x.state_index(obs).unwrap();
        let g = groups.iter().position(|g| g.contains(&i)).unwrap();
        out.evidence.insert(m.target.clone(), names[g].clone());
    }
    if x.role == Role::Hypothesis {
        for v in &mut out.values {
            v.utility = merge_utilities(&v.utility, &m.target, &x.states, &names, &mix);
        }
    }
    out.validate()?;

    let (before, after) = if d.is_decision_ready() {
        let before = best_decision(d, partition)?;
        let after = best_decision(&out, partition)?;
        (Some(before), Some(after))
    } else {
        (None, None)
    };
    if let (true, Some(b), Some(a)) = (info_loss, &before, &after) {
        let class_before = partition.class_of_treatment(&b.best_treatment);
        let class_after = partition.class_of_treatment(&a.best_treatment);
        let moved = if class_before.is_some() && class_after.is_some() {
            class_before != class_after
        } else {
            b.best_treatment != a.best_treatment
        };
        if moved {
            return Err(UpdateError::Rejected { before: Box::new(b.clone()), after: Box::new(a.clone()) });
        }
    }
    Ok(CoarsenOutcome { diagram: out, info_loss, uniform_groups, before, after })
}

// ---------------------------------------------------------------- additions

/// Nodes [`extend_topology`] would add for `required`, in name order.
pub fn nodes_to_add(d: &InfluenceDiagram, kb: &KnowledgeBase, required: &BTreeSet<String>) -> Vec<String> {
    let required: BTreeSet<String> = required.iter().filter(|r| !d.chance.contains_key(*r)).cloned().collect();
    if required.is_empty() {
        return Vec::new();
    }
    let (hyps, others): (BTreeSet<String>, BTreeSet<String>) =
        required.into_iter().partition(|r| kb.variable(r).is_some_and(|v| v.role == Role::Hypothesis));
    let observed: BTreeSet<String> = d.chance.keys().cloned().chain(others).collect();
    select_nodes(kb, &observed, &BTreeSet::new(), &hyps).into_keys().filter(|n| !d.chance.contains_key(n)).collect()
}

/// Adds the `required` variables with their KB ancestors and bridging
/// children, tables taken at `t`. The pending decision gains every KB
/// treatment touching a hypothesis now present.
pub fn extend_topology(
    d: &InfluenceDiagram,
    kb: &KnowledgeBase,
    required: &BTreeSet<String>,
    t: &str,
) -> Result<InfluenceDiagram, UpdateError> {
    for r in required {
        if kb.variable(r).is_none() {
            return Err(ConstructError::Kb(crate::kb::KbError::UnknownVariable(r.clone())).into());
        }
    }
    let added = nodes_to_add(d, kb, required);
    if added.is_empty() {
        return Ok(d.clone());
    }
    let mut out = d.clone();
    for n in &added {
        out.chance.insert(n.clone(), chance_node(kb, n, t, None)?);
    }
    refresh_alternatives(&mut out, kb);
    out.validate()?;
    Ok(out)
}

/// Recomputes the pending decision's alternatives from the hypotheses present.
pub(crate) fn refresh_alternatives(d: &mut InfluenceDiagram, kb: &KnowledgeBase) {
    let hyps: BTreeSet<String> = d.hypothesis_names().into_iter().collect();
    let treatments = treatments_for(kb, &hyps);
    let index = d.decisions.len().max(1);
    let Some(dec) = d.decisions.last_mut() else { return };
    if dec.alternatives == treatments {
        return;
    }
    let (new_dec, new_val) = decision_and_value(kb, index, &treatments);
    dec.alternatives = new_dec.alternatives;
    dec.tests = new_dec.tests;
    let name = dec.name.clone();
    if let Some(v) = d.values.iter_mut().find(|v| v.decision == name) {
        v.utility = new_val.utility;
    }
}

/// Rebuilds from the KB for the observations in `log`, keeping the
/// hypotheses in `include` and re-attaching past decisions of `previous`.
pub fn reinstantiate(
    kb: &KnowledgeBase,
    log: &[Event],
    t: &str,
    include: &BTreeSet<String>,
    previous: Option<&InfluenceDiagram>,
) -> Result<InfluenceDiagram, UpdateError> {
    let (mut d, _) = instantiate_with(kb, &ObservationSet::new(log.to_vec()), t, include)?;
    if let Some(prev) = previous {
        let taken = prev.decisions.iter().filter(|x| x.chosen.is_some()).count();
        if taken > 0 {
            let pending_alts = d.decisions[0].alternatives.clone();
            let mut decisions: Vec<_> = prev.decisions[..taken].to_vec();
            let mut values: Vec<_> = prev.values.iter().filter(|v| decisions.iter().any(|x| x.name == v.decision)).cloned().collect();
            let (dec, val) = decision_and_value(kb, taken + 1, &pending_alts);
            decisions.push(dec);
            values.push(val);
            d.decisions = decisions;
            d.values = values;
        }
    }
    d.validate()?;
    Ok(d)
}

// ---------------------------------------------------------------- planning

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UpdateStep {
    ReviseCpts { time: String },
    Refine { map: RefinementMap },
    Coarsen { map: CoarseningMap },
    AddNodes { required: Vec<String>, nodes: Vec<String>, time: String },
    Reinstantiate { time: String, include: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedStep {
    pub step: UpdateStep,
    pub rationale: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdatePlan {
    pub verdict: Verdict,
    pub steps: Vec<PlannedStep>,
    /// Nodes the incremental edit would touch.
    pub cost_estimate: usize,
    /// Node count of the diagram after the incremental edit.
    pub total_nodes: usize,
}

/// Touched and total node counts for making `required` representable in `d`:
/// added chance nodes, nodes whose granularity is restored, plus the decision
/// node when its alternatives change and the value node when the hypothesis
/// set changes.
pub fn estimate_cost(d: &InfluenceDiagram, kb: &KnowledgeBase, required: &BTreeSet<String>, restored: usize) -> (usize, usize) {
    let added = nodes_to_add(d, kb, required);
    let mut hyps: BTreeSet<String> = d.hypothesis_names().into_iter().collect();
    let hyps_before = hyps.len();
    hyps.extend(added.iter().filter(|n| kb.variable(n).is_some_and(|v| v.role == Role::Hypothesis)).cloned());
    let alternatives_change = d.current_decision().is_some_and(|dec| dec.alternatives != treatments_for(kb, &hyps));
    let mut cost = added.len() + restored;
    if alternatives_change {
        cost += 1;
    }
    if hyps.len() != hyps_before {
        cost += 1;
    }
    (cost, d.node_count() + added.len())
}

/// Template step that brings `var`'s states in `d` back to the KB's.
fn restoring_step(d: &InfluenceDiagram, kb: &KnowledgeBase, var: &str) -> Option<UpdateStep> {
    let node = d.chance.get(var)?;
    let want = &kb.variable(var)?.states;
    for c in kb.coarsenings.iter().filter(|c| c.var == var) {
        let map = CoarseningMap::from_template(c);
        let mut probe = d.clone();
        probe.evidence.clear();
        if let Ok((names, _)) = coarse_groups(&probe, &map) {
            if &names == want {
                return Some(UpdateStep::Coarsen { map });
            }
        }
    }
    for r in kb.refinements.iter().filter(|r| r.var == var) {
        let map = RefinementMap::from_template(r);
        if let Ok(sm) = refined_states(d, &map) {
            if &sm.new_states == want && node.states != *want {
                return Some(UpdateStep::Refine { map });
            }
        }
    }
    None
}

/// Variables whose state space in `d` differs from the KB's, among `vars`.
fn off_granularity(d: &InfluenceDiagram, kb: &KnowledgeBase, vars: &BTreeSet<String>) -> Vec<String> {
    vars.iter()
        .filter(|v| {
            let (Some(n), Some(k)) = (d.chance.get(*v), kb.variable(v)) else { return false };
            n.states != k.states
        })
        .cloned()
        .collect()
}

/// Chooses the edits that make the exceeding challengers representable.
pub fn plan_update(d: &InfluenceDiagram, kb: &KnowledgeBase, report: &SensitivityReport) -> UpdatePlan {
    plan_update_with(d, kb, report, REBUILD_THRESHOLD)
}

pub fn plan_update_with(d: &InfluenceDiagram, kb: &KnowledgeBase, report: &SensitivityReport, threshold: f64) -> UpdatePlan {
    let empty = |verdict| UpdatePlan { verdict, steps: Vec::new(), cost_estimate: 0, total_nodes: d.node_count() };
    let Some(time) = report.target_time.clone() else { return empty(Verdict::NoUpdate) };
    let revise = PlannedStep {
        step: UpdateStep::ReviseCpts { time: time.clone() },
        rationale: format!("challengers exceed the incumbent under the tables at {time}"),
    };
    if report.verdict == Verdict::NoUpdate {
        return empty(Verdict::NoUpdate);
    }
    if report.verdict == Verdict::ValuesOnly {
        return UpdatePlan { verdict: Verdict::ValuesOnly, steps: vec![revise], cost_estimate: 0, total_nodes: d.node_count() };
    }
    let exceeders = report.target_exceeders();
    let required: BTreeSet<String> = exceeders.iter().flat_map(|c| c.requires.iter().cloned()).collect();
    let touched: BTreeSet<String> = exceeders.iter().flat_map(|c| kb.utilities.touched_vars(&c.treatment)).collect();
    let mut restore = Vec::new();
    let mut restorable = true;
    for v in off_granularity(d, kb, &touched) {
        match restoring_step(d, kb, &v) {
            Some(step) => restore.push(PlannedStep { step, rationale: format!("restore the KB states of {v}") }),
            None => restorable = false,
        }
    }
    let (cost, total) = estimate_cost(d, kb, &required, restore.len());
    let rebuild = !restorable || (cost as f64) > threshold * (total as f64);
    if rebuild {
        let mut include: BTreeSet<String> = d.hypothesis_names().into_iter().collect();
        include.extend(required.iter().filter(|r| kb.variable(r).is_some_and(|v| v.role == Role::Hypothesis)).cloned());
        let rationale = if restorable {
            format!("editing would touch {cost} of {total} nodes")
        } else {
            "no template restores the needed states".to_string()
        };
        return UpdatePlan {
            verdict: Verdict::Reinstantiate,
            steps: vec![PlannedStep { step: UpdateStep::Reinstantiate { time, include: include.into_iter().collect() }, rationale }],
            cost_estimate: cost,
            total_nodes: total,
        };
    }
    let mut steps = restore;
    steps.push(revise);
    if !required.is_empty() {
        steps.push(PlannedStep {
            step: UpdateStep::AddNodes {
                required: required.iter().cloned().collect(),
                nodes: nodes_to_add(d, kb, &required),
                time: time.clone(),
            },
            rationale: format!("challengers need {}", required.iter().cloned().collect::<Vec<_>>().join(", ")),
        });
    }
    UpdatePlan { verdict: Verdict::Topology, steps, cost_estimate: cost, total_nodes: total }
}

/// Applies one step. `log` is the observation history used when rebuilding.
pub fn apply_step(
    d: &InfluenceDiagram,
    kb: &KnowledgeBase,
    step: &UpdateStep,
    log: &[Event],
    partition: &EquivalencePartition,
) -> Result<InfluenceDiagram, UpdateError> {
    match step {
        UpdateStep::ReviseCpts { time } => update_probabilities(d, kb, time),
        UpdateStep::Refine { map } => refine_node(d, map),
        UpdateStep::Coarsen { map } => Ok(coarsen_node(d, map, partition)?.diagram),
        UpdateStep::AddNodes { required, time, .. } => extend_topology(d, kb, &required.iter().cloned().collect(), time),
        UpdateStep::Reinstantiate { time, include } => reinstantiate(kb, log, time, &include.iter().cloned().collect(), Some(d)),
    }
}

pub fn apply_plan(
    d: &InfluenceDiagram,
    kb: &KnowledgeBase,
    plan: &UpdatePlan,
    log: &[Event],
    partition: &EquivalencePartition,
) -> Result<InfluenceDiagram, UpdateError> {
    let mut cur = d.clone();
    for s in &plan.steps {
        cur = apply_step(&cur, kb, &s.step, log, partition)?;
    }
    Ok(cur)
}
