//! Generators and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempdx_core::cpt::{config_count, Cpt};
use tempdx_core::diagram::{ChanceNode, DecisionNode, InfluenceDiagram, ValueNode};
use tempdx_core::kb::{parse_kb, KnowledgeBase, LiteralUtility, OverrideUtility, Role, UtilityTable};
use tempdx_core::session::{Command, Session};
use tempdx_core::update::{CoarseningMap, RefinementFragments, RefinementMap};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture_path(name: &str) -> String {
    format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

pub fn load(name: &str) -> KnowledgeBase {
    parse_kb(&std::fs::read_to_string(fixture_path(name)).unwrap()).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn random_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct DiagramShape {
    pub max_nodes: usize,
    pub max_states: usize,
    pub max_parents: usize,
    pub overrides: bool,
}

impl Default for DiagramShape {
    fn default() -> Self {
        Self { max_nodes: 10, max_states: 2, max_parents: 3, overrides: true }
    }
}

/// A random decision-ready diagram: nodes X0..Xn in topological order with
/// strictly positive tables, some hypotheses, some observed observables and
/// a pending decision over two or three treatments.
pub fn random_diagram<R: Rng>(rng: &mut R, shape: DiagramShape) -> InfluenceDiagram {
    let n = rng.gen_range(2..=shape.max_nodes);
    let mut d = InfluenceDiagram::new("t1");
    let mut names = Vec::new();
    let mut hyps = Vec::new();
    for i in 0..n {
        let name = format!("X{i}");
        let k = rng.gen_range(2..=shape.max_states);
        let states: Vec<String> = (0..k).map(|j| format!("s{j}")).collect();
        let mut parents: Vec<String> = names.iter().filter(|_| rng.gen_bool(0.4)).cloned().collect();
        parents.shuffle(rng);
        parents.truncate(shape.max_parents);
        let hypothesis = i == 0 || (parents.is_empty() && rng.gen_bool(0.5)) || rng.gen_bool(0.2);
        let cards = d.cards(&parents);
        let rows = (0..config_count(&cards)).map(|_| random_row(rng, k)).collect();
        let role = if hypothesis { Role::Hypothesis } else { Role::Observable };
        if hypothesis {
            hyps.push(name.clone());
        }
        d.chance.insert(
            name.clone(),
            ChanceNode {
                name: name.clone(),
                states,
                role,
                normal: hypothesis.then(|| "s0".to_string()),
                cpt: Cpt::new(parents, rows),
                time: "t1".into(),
                variant: None,
            },
        );
        names.push(name);
    }
    for node in d.chance.values() {
        if node.role == Role::Observable && rng.gen_bool(0.4) {
            let s = node.states[rng.gen_range(0..node.states.len())].clone();
            d.evidence.insert(node.name.clone(), s);
        }
    }
    let treatments: Vec<String> = (0..rng.gen_range(2..=3)).map(|i| format!("T{i}")).collect();
    let mut utility = UtilityTable {
        normals: hyps.iter().map(|h| (h.clone(), "s0".to_string())).collect(),
        ..Default::default()
    };
    for t in &treatments {
        for h in &hyps {
            for s in &d.chance[h].states[1..] {
                if rng.gen_bool(0.7) {
                    utility.literal_entries.push(LiteralUtility {
                        treatment: t.clone(),
                        var: h.clone(),
                        state: s.clone(),
                        value: rng.gen_range(-5.0..20.0),
                    });
                }
            }
        }
        if shape.overrides && rng.gen_bool(0.5) {
            let h = hyps.choose(rng).unwrap();
            let s = d.chance[h].states.choose(rng).unwrap().clone();
            utility.override_entries.push(OverrideUtility {
                treatment: t.clone(),
                assignment: vec![(h.clone(), s)],
                value: rng.gen_range(-5.0..20.0),
            });
        }
    }
    d.decisions.push(DecisionNode { name: "D1".into(), alternatives: treatments, tests: vec![], chosen: None });
    d.values.push(ValueNode { name: "V1".into(), decision: "D1".into(), utility });
    d.validate().expect("generated diagram is valid");
    d
}

fn row_index(cpt: &Cpt, d: &InfluenceDiagram, full: &BTreeMap<String, usize>) -> usize {
    // Mixed radix, first parent most significant.
    let mut idx = 0;
    for p in &cpt.parents {
        idx = idx * d.chance[p].states.len() + full[p];
    }
    idx
}

/// Every full assignment of the chance nodes with its joint probability,
/// ignoring evidence.
pub fn enumerate_joint(d: &InfluenceDiagram) -> Vec<(BTreeMap<String, usize>, f64)> {
    let names: Vec<&String> = d.chance.keys().collect();
    let cards: Vec<usize> = names.iter().map(|n| d.chance[*n].states.len()).collect();
    let total: usize = cards.iter().product();
    let mut out = Vec::with_capacity(total);
    for mut k in 0..total {
        let mut full = BTreeMap::new();
        for (i, n) in names.iter().enumerate().rev() {
            full.insert((*n).clone(), k % cards[i]);
            k /= cards[i];
        }
        let p: f64 = d.chance.values().map(|node| node.cpt.rows[row_index(&node.cpt, d, &full)][full[&node.name]]).product();
        out.push((full, p));
    }
    out
}

fn consistent(d: &InfluenceDiagram, full: &BTreeMap<String, usize>) -> bool {
    d.evidence.iter().all(|(v, s)| d.chance[v].states[full[v]] == *s)
}

/// P(var | evidence) by enumeration.
pub fn oracle_marginal(d: &InfluenceDiagram, var: &str) -> Vec<f64> {
    let mut out = vec![0.0; d.chance[var].states.len()];
    let mut z = 0.0;
    for (full, p) in enumerate_joint(d) {
        if consistent(d, &full) {
            out[full[var]] += p;
            z += p;
        }
    }
    out.iter().map(|x| x / z).collect()
}

/// Σ_x p(x | e) μ(hypotheses of x, T) by enumeration.
pub fn oracle_eu(d: &InfluenceDiagram, treatment: &str) -> f64 {
    let u = &d.values.last().unwrap().utility;
    let hyps: Vec<String> = d.hypothesis_names();
    let (mut num, mut z) = (0.0, 0.0);
    for (full, p) in enumerate_joint(d) {
        if !consistent(d, &full) {
            continue;
        }
        let dx: BTreeMap<String, String> = hyps.iter().map(|h| (h.clone(), d.chance[h].states[full[h]].clone())).collect();
        num += p * u.value(treatment, &dx);
        z += p;
    }
    num / z
}

/// Joint over the original variables of a refined diagram, with the refined
/// node's new values folded back into the states they came from.
pub fn folded_joint(refined: &InfluenceDiagram, m: &RefinementMap, original: &InfluenceDiagram) -> BTreeMap<Vec<usize>, f64> {
    let x = &original.chance[&m.target];
    let back: Vec<usize> = refined.chance[&m.target]
        .states
        .iter()
        .map(|s| {
            let src = m.splits.iter().find(|(_, parts)| parts.contains(s)).map_or(s.as_str(), |(src, _)| src.as_str());
            x.state_index(src).unwrap()
        })
        .collect();
    let mut out = BTreeMap::new();
    for (full, p) in enumerate_joint(refined) {
        let key: Vec<usize> = full.iter().map(|(n, &i)| if *n == m.target { back[i] } else { i }).collect();
        *out.entry(key).or_insert(0.0) += p;
    }
    out
}

pub fn joint_by_key(d: &InfluenceDiagram) -> BTreeMap<Vec<usize>, f64> {
    enumerate_joint(d).into_iter().map(|(full, p)| (full.values().copied().collect(), p)).collect()
}

/// A random split of one state of a random node, preferring nodes with children.
pub fn random_refinement<R: Rng>(rng: &mut R, d: &InfluenceDiagram) -> RefinementMap {
    let with_children: Vec<&String> = d.chance.keys().filter(|n| !d.children(n).is_empty() && !d.evidence.contains_key(*n)).collect();
    let free: Vec<&String> = d.chance.keys().filter(|n| !d.evidence.contains_key(*n)).collect();
    let pool = if with_children.is_empty() { free } else { with_children };
    let target = (*pool.choose(rng).expect("some node is unobserved")).clone();
    let node = &d.chance[&target];
    let state = node.states.choose(rng).unwrap().clone();
    let k = rng.gen_range(2..=3);
    let parts: Vec<String> = (0..k).map(|i| format!("{state}_{i}")).collect();
    let w = random_row(rng, k);
    let weights = parts.iter().cloned().zip(w).collect();
    RefinementMap { target, splits: vec![(state, parts)], weights, fragments: None }
}

/// A random script that a fresh session accepts command by command.
pub fn random_script<R: Rng>(rng: &mut R, kb: &Arc<KnowledgeBase>, steps: usize) -> Vec<Command> {
    let labels = kb.time_axis.labels.clone();
    let mut s = Session::new(kb.clone(), &labels[0]).unwrap();
    let mut out = vec![Command::Start { time: labels[0].clone() }];
    let observables: Vec<_> = kb.variables.iter().filter(|v| v.role != Role::Hypothesis).collect();
    let mut attempts = 0;
    while out.len() <= steps && attempts < steps * 10 {
        attempts += 1;
        let pos = kb.time_axis.position(&s.time).unwrap();
        let time = labels[(pos + rng.gen_range(0..=1)).min(labels.len() - 1)].clone();
        let roll = rng.gen_range(0..10);
        let cmd = if roll < 5 || s.diagram.is_none() {
            let v = observables.choose(rng).unwrap();
            Command::Observe { var: v.name.clone(), state: v.states.choose(rng).unwrap().clone(), time }
        } else if roll < 8 {
            let alts = s.diagram.as_ref().and_then(|d| d.current_decision()).map(|d| d.alternatives.clone()).unwrap_or_default();
            match alts.choose(rng) {
                Some(a) => Command::Act { choice: a.clone() },
                None => continue,
            }
        } else {
            let v = observables.choose(rng).unwrap();
            Command::Feedback { var: v.name.clone(), state: v.states.choose(rng).unwrap().clone(), time }
        };
        if s.run(&cmd).is_ok() {
            out.push(cmd);
        }
    }
    out
}

/// Names of the hypotheses of a diagram, as a set.
pub fn hypothesis_set(d: &InfluenceDiagram) -> BTreeSet<String> {
    d.hypothesis_names().into_iter().collect()
}

/// Moves mass inside one row of the fragments so that the refined tables no
/// longer reproduce the original ones.
pub fn perturb(d: &InfluenceDiagram, f: &RefinementFragments, target: &str, split_state: &str) -> RefinementFragments {
    let mut f = f.clone();
    if let Some((_, cpt)) = f.children.iter_mut().next() {
        let row = &mut cpt.rows[0];
        let delta = row[0].min(row[1]) / 2.0;
        row[0] -= delta;
        row[1] += delta;
        return f;
    }
    // No children: shift mass from the first new value to another source state.
    let x = &d.chance[target];
    let first = x.state_index(split_state).unwrap();
    let other = if first == 0 { f.node.rows[0].len() - 1 } else { 0 };
    let row = &mut f.node.rows[0];
    let delta = row[first] / 2.0;
    row[first] -= delta;
    row[other] += delta;
    f
}

pub fn node(name: &str, states: &[&str], role: Role, parents: &[&str], rows: Vec<Vec<f64>>) -> ChanceNode {
    ChanceNode {
        name: name.into(),
        states: states.iter().map(|s| s.to_string()).collect(),
        role,
        normal: (role == Role::Hypothesis).then(|| states[0].to_string()),
        cpt: Cpt::new(parents.iter().map(|p| p.to_string()).collect(), rows),
        time: "t1".into(),
        variant: None,
    }
}

/// H ∈ {ok, x, y} with one observed child E; TX treats x, TY treats y.
pub fn merge_fixture(e_given_y: f64) -> InfluenceDiagram {
    let mut d = InfluenceDiagram::new("t1");
    d.chance.insert("H".into(), node("H", &["ok", "x", "y"], Role::Hypothesis, &[], vec![vec![0.5, 0.1, 0.4]]));
    d.chance.insert(
        "E".into(),
        node("E", &["no", "yes"], Role::Observable, &["H"], vec![vec![0.9, 0.1], vec![0.1, 0.9], vec![1.0 - e_given_y, e_given_y]]),
    );
    d.evidence.insert("E".into(), "yes".into());
    let lit = |t: &str, s: &str| LiteralUtility { treatment: t.into(), var: "H".into(), state: s.into(), value: 10.0 };
    let utility = UtilityTable {
        literal_entries: vec![lit("TX", "x"), lit("TY", "y")],
        override_entries: vec![],
        normals: BTreeMap::from([("H".to_string(), "ok".to_string())]),
    };
    d.decisions.push(DecisionNode { name: "D1".into(), alternatives: vec!["TX".into(), "TY".into()], tests: vec![], chosen: None });
    d.values.push(ValueNode { name: "V1".into(), decision: "D1".into(), utility });
    d
}

pub fn merge_xy() -> CoarseningMap {
    CoarseningMap { target: "H".into(), merges: vec![("ill".into(), vec!["x".into(), "y".into()])] }
}

/// Two treatments, one parameter: T1 is worth 4 whatever the diagnosis, T2
/// is worth 10 if H=bad. P(H=bad) is 0.1 at t1 and `p` at t2, so the
/// expected-utility lines cross at p = 0.4.
pub fn threshold_kb(p: f64) -> KnowledgeBase {
    let text = format!(
        "var H role=hypothesis states=ok,bad normal=ok
var E role=observable states=no,yes
arc H -> E
time t1 t2
cpt H @ t1
| : 0.9,0.1
cpt H @ t2
| : {q},{p}
cpt E @ t1
| H=ok : 0.5,0.5
| H=bad : 0.5,0.5
treat T1
treat T2
util T1 full : 4
util T1 full H=bad : 4
util T2 H=bad : 10
",
        q = 1.0 - p
    );
    parse_kb(&text).unwrap()
}

pub const THRESHOLD_CROSSOVER: f64 = 0.4;
