use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{KnowledgeBase, Role, TriggerEffect};
use crate::cpt::config_count;
use crate::PROB_TOLERANCE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    EmptyTimeAxis,
    DuplicateTime,
    DuplicateVariable,
    DuplicateState,
    TooFewStates,
    MissingNormal,
    UnknownNormal,
    DanglingArc,
    Cycle,
    UnknownBankEntry,
    ParentMismatch,
    RowArity,
    RowSum,
    NoCoverage,
    UnknownUtilityReference,
    NonFiniteUtility,
    TreatmentWithoutUtility,
    EmptyTrigger,
    UnknownTriggerReference,
    BadGranularityMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// The offending element, e.g. `ST @ t1 row 2` or `W -> ST`.
    pub subject: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} [{}]: {}", self.kind, self.subject, self.detail)
    }
}

fn v(kind: ViolationKind, subject: impl Into<String>, detail: impl Into<String>) -> Violation {
    Violation { kind, subject: subject.into(), detail: detail.into() }
}

/// Checks every knowledge-base invariant; an empty result means valid.
pub fn validate_kb(kb: &KnowledgeBase) -> Vec<Violation> {
    let mut out = Vec::new();
    check_time(kb, &mut out);
    check_variables(kb, &mut out);
    check_arcs(kb, &mut out);
    check_bank(kb, &mut out);
    check_utilities(kb, &mut out);
    check_triggers(kb, &mut out);
    check_maps(kb, &mut out);
    out
}

fn check_time(kb: &KnowledgeBase, out: &mut Vec<Violation>) {
    if kb.time_axis.labels.is_empty() {
        out.push(v(ViolationKind::EmptyTimeAxis, "time", "the time axis needs at least one index"));
    }
    let mut seen = BTreeSet::new();
    for l in &kb.time_axis.labels {
        if !seen.insert(l) {
            out.push(v(ViolationKind::DuplicateTime, l, "time labels must be strictly ordered"));
        }
    }
}

fn check_variables(kb: &KnowledgeBase, out: &mut Vec<Violation>) {
    let mut names = BTreeSet::new();
    for var in &kb.variables {
        if !names.insert(&var.name) {
            out.push(v(ViolationKind::DuplicateVariable, &var.name, "variable declared twice"));
        }
        if var.states.len() < 2 {
            out.push(v(ViolationKind::TooFewStates, &var.name, "a state space needs at least two states"));
        }
        let mut states = BTreeSet::new();
        for s in &var.states {
            if !states.insert(s) {
                out.push(v(ViolationKind::DuplicateState, format!("{}={}", var.name, s), "state label repeated"));
            }
        }
        match (&var.normal, var.role) {
            (None, Role::Hypothesis) => {
                out.push(v(ViolationKind::MissingNormal, &var.name, "hypothesis variables need a normal state"))
            }
            (Some(n), _) if !var.states.contains(n) => {
                out.push(v(ViolationKind::UnknownNormal, &var.name, format!("normal state '{n}' is not a state")))
            }
            _ => {}
        }
    }
}

fn check_arcs(kb: &KnowledgeBase, out: &mut Vec<Violation>) {
    for (a, b) in &kb.arcs {
        let missing: Vec<&String> = [a, b].into_iter().filter(|x| kb.variable(x).is_none()).collect();
        if !missing.is_empty() {
            out.push(v(
                ViolationKind::DanglingArc,
                format!("{a} -> {b}"),
                format!("undeclared endpoint {}", missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")),
            ));
        }
    }
    for cycle in find_cycles(kb) {
        out.push(v(ViolationKind::Cycle, cycle.join(" -> "), "causal arcs must form a DAG"));
    }
}

/// One representative cycle per strongly connected component that contains one.
fn find_cycles(kb: &KnowledgeBase) -> Vec<Vec<String>> {
    let names: Vec<&str> = kb.variables.iter().map(|v| v.name.as_str()).collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let mut adj = vec![Vec::new(); names.len()];
    for (a, b) in &kb.arcs {
        if let (Some(&i), Some(&j)) = (index.get(a.as_str()), index.get(b.as_str())) {
            adj[i].push(j);
        }
    }
    let sccs = tarjan(&adj);
    let mut cycles = Vec::new();
    for comp in sccs {
        let members: BTreeSet<usize> = comp.iter().copied().collect();
        let start = *members.iter().next().unwrap();
        let self_loop = adj[start].contains(&start);
        if members.len() == 1 && !self_loop {
            continue;
        }
        // Walk inside the component until we return to the start.
        let mut path = vec![start];
        let mut prev: BTreeMap<usize, usize> = BTreeMap::new();
        let mut queue = std::collections::VecDeque::from([start]);
        let mut found = None;
        let mut seen = BTreeSet::from([start]);
        'bfs: while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if !members.contains(&w) {
                    continue;
                }
                if w == start {
                    found = Some(u);
                    break 'bfs;
                }
                if seen.insert(w) {
                    prev.insert(w, u);
                    queue.push_back(w);
                }
            }
        }
        if let Some(mut u) = found {
            let mut back = vec![u];
            while u != start {
                u = prev[&u];
                back.push(u);
            }
            back.reverse();
            path = back;
        }
        path.push(start);
        cycles.push(path.into_iter().map(|i| names[i].to_string()).collect());
    }
    cycles
}

fn tarjan(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    struct State<'a> {
        adj: &'a [Vec<usize>],
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }
    fn visit(s: &mut State<'_>, u: usize) {
        s.index[u] = Some(s.next);
        s.low[u] = s.next;
        s.next += 1;
        s.stack.push(u);
        s.on_stack[u] = true;
        for i in 0..s.adj[u].len() {
            let w = s.adj[u][i];
            match s.index[w] {
                None => {
                    visit(s, w);
                    s.low[u] = s.low[u].min(s.low[w]);
                }
                Some(iw) if s.on_stack[w] => s.low[u] = s.low[u].min(iw),
                _ => {}
            }
        }
        if Some(s.low[u]) == s.index[u] {
            let mut comp = Vec::new();
            loop {
                let w = s.stack.pop().unwrap();
                s.on_stack[w] = false;
                comp.push(w);
                if w == u {
                    break;
                }
            }
            s.out.push(comp);
        }
    }
    let n = adj.len();
    let mut s = State { adj, index: vec![None; n], low: vec![0; n], on_stack: vec![false; n], stack: Vec::new(), next: 0, out: Vec::new() };
    for u in 0..n {
        if s.index[u].is_none() {
            visit(&mut s, u);
        }
    }
    s.out.sort_by_key(|c| *c.iter().min().unwrap());
    s.out
}

fn check_bank(kb: &KnowledgeBase, out: &mut Vec<Violation>) {
    let mut covered = BTreeSet::new();
    for (key, cpt) in &kb.cpt_bank.entries {
        let label = format!(
            "{} @ {}{}",
            key.var,
            key.time,
            key.variant.as_ref().map(|t| format!(" variant={t}")).unwrap_or_default()
        );
        let Some(var) = kb.variable(&key.var) else {
            out.push(v(ViolationKind::UnknownBankEntry, &label, "table for an undeclared variable"));
            continue;
        };
        if !kb.time_axis.contains(&key.time) {
            out.push(v(ViolationKind::UnknownBankEntry, &label, "table at a time index not on the axis"));
            continue;
        }
        if key.variant.is_none() {
            covered.insert(key.var.clone());
        }
        let kb_parents = kb.parents(&key.var);
        let same_set = kb_parents.len() == cpt.parents.len() && kb_parents.iter().all(|p| cpt.parents.contains(p));
        if !same_set {
            out.push(v(
                ViolationKind::ParentMismatch,
                &label,
                format!("conditioned on {{{}}}, KB parents are {{{}}}", cpt.parents.join(","), kb_parents.join(",")),
            ));
            continue;
        }
        let cards: Vec<usize> = cpt
            .parents
            .iter()
            .map(|p| kb.variable(p).map_or(1, |pv| pv.states.len()))
            .collect();
        if cpt.rows.len() != config_count(&cards) {
            out.push(v(
                ViolationKind::RowArity,
                &label,
                format!("{} rows for {} parent configurations", cpt.rows.len(), config_count(&cards)),
            ));
            continue;
        }
        for (i, row) in cpt.rows.iter().enumerate() {
            if row.len() != var.states.len() {
                let what = if row.is_empty() { "missing row".to_string() } else { format!("{} entries for {} states", row.len(), var.states.len()) };
                out.push(v(ViolationKind::RowArity, format!("{label} row {i}"), what));
                continue;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOLERANCE || row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                out.push(v(ViolationKind::RowSum, format!("{label} row {i}"), format!("row sums to {sum}")));
            }
        }
    }
    for var in &kb.variables {
        if !covered.contains(&var.name) {
            out.push(v(ViolationKind::NoCoverage, &var.name, "no default table at any time index"));
        }
    }
}

fn check_utilities(kb: &KnowledgeBase, out: &mut Vec<Violation>) {
    let u = &kb.utilities;
    let literal_ok = |var: &str, state: &str| kb.variable(var).is_some_and(|v| v.states.iter().any(|s| s == state));
    for l in &u.literal_entries {
        let subject = format!("util {} {}={}", l.treatment, l.var, l.state);
        if kb.treatment(&l.treatment).is_none() || !literal_ok(&l.var, &l.state) {
            out.push(v(ViolationKind::UnknownUtilityReference, &subject, "unknown treatment or literal"));
        }
        if !l.value.is_finite() {
            out.push(v(ViolationKind::NonFiniteUtility, &subject, "utility must be finite"));
        }
    }
    for o in &u.override_entries {
        let subject = format!("util {} full", o.treatment);
        if kb.treatment(&o.treatment).is_none() || !o.assignment.iter().all(|(a, b)| literal_ok(a, b)) {
            out.push(v(ViolationKind::UnknownUtilityReference, &subject, "unknown treatment or literal"));
        }
        if !o.value.is_finite() {
            out.push(v(ViolationKind::NonFiniteUtility, &subject, "utility must be finite"));
        }
    }
    for t in &kb.treatments {
        if !u.mentions(&t.name) {
            out.push(v(ViolationKind::TreatmentWithoutUtility, &t.name, "treatment has no utility entry"));
        }
    }
}

fn check_triggers(kb: &KnowledgeBase, out: &mut Vec<Violation>) {
    for rule in &kb.triggers {
        if rule.pattern.is_empty() {
            out.push(v(ViolationKind::EmptyTrigger, &rule.name, "pattern is empty"));
        }
        for step in &rule.pattern {
            if kb.variable(&step.var).and_then(|x| x.state_index(&step.state)).is_none() {
                out.push(v(
                    ViolationKind::UnknownTriggerReference,
                    &rule.name,
                    format!("unknown literal {}={}", step.var, step.state),
                ));
            }
        }
        let target = rule.effect.var();
        match (&rule.effect, kb.variable(target)) {
            (_, None) => out.push(v(ViolationKind::UnknownTriggerReference, &rule.name, format!("unknown variable {target}"))),
            (TriggerEffect::Include { .. }, Some(var)) if var.role != Role::Hypothesis => out.push(v(
                ViolationKind::UnknownTriggerReference,
                &rule.name,
                format!("include() needs a hypothesis variable, {target} is {}", var.role.as_str()),
            )),
            _ => {}
        }
    }
}

fn check_maps(kb: &KnowledgeBase, out: &mut Vec<Violation>) {
    for r in &kb.refinements {
        let Some(var) = kb.variable(&r.var) else {
            out.push(v(ViolationKind::BadGranularityMap, &r.name, format!("unknown variable {}", r.var)));
            continue;
        };
        let mut new_names = BTreeSet::new();
        for (state, parts) in &r.splits {
            if var.state_index(state).is_none() {
                out.push(v(ViolationKind::BadGranularityMap, &r.name, format!("{state} is not a state of {}", r.var)));
            }
            let sum: f64 = parts.iter().map(|(_, w)| w).sum();
            if parts.is_empty() || (sum - 1.0).abs() > PROB_TOLERANCE || parts.iter().any(|(_, w)| *w <= 0.0 || *w > 1.0) {
                out.push(v(ViolationKind::BadGranularityMap, &r.name, format!("weights for {state} must lie in (0,1] and sum to 1")));
            }
            for (n, _) in parts {
                if !new_names.insert(n.clone()) {
                    out.push(v(ViolationKind::BadGranularityMap, &r.name, format!("new value {n} repeated")));
                }
            }
        }
    }
    for c in &kb.coarsenings {
        if kb.variable(&c.var).is_none() {
            out.push(v(ViolationKind::BadGranularityMap, &c.name, format!("unknown variable {}", c.var)));
        }
        let mut seen = BTreeSet::new();
        for (_, group) in &c.merges {
            for s in group {
                if !seen.insert(s) {
                    out.push(v(ViolationKind::BadGranularityMap, &c.name, format!("state {s} merged twice")));
                }
            }
        }
    }
}
