//! Whether the tables of other time indices would change the decision, and
//! what kind of model update that calls for.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagram::InfluenceDiagram;
use crate::equivalence::EquivalencePartition;
use crate::inference::{best_decision, expected_utilities, InferenceError};
use crate::kb::{KnowledgeBase, Role};
use crate::update::{estimate_cost, extend_topology, update_probabilities, REBUILD_THRESHOLD};

/// Default candidate window: axis indices within this many positions of `t`.
pub const DEFAULT_WINDOW: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("unknown time index '{0}'")]
    UnknownTime(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    NoUpdate,
    ValuesOnly,
    Topology,
    Reinstantiate,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::NoUpdate => "no-update",
            Verdict::ValuesOnly => "values-only",
            Verdict::Topology => "topology",
            Verdict::Reinstantiate => "reinstantiate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Incumbent {
    pub treatment: String,
    /// β, held fixed across candidate times.
    pub beta: f64,
    pub time: String,
    pub class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Challenger {
    pub time: String,
    pub treatment: String,
    /// Class in the incumbent's partition; `None` for treatments the diagram
    /// does not yet offer.
    pub class: Option<usize>,
    pub value: Option<f64>,
    pub exceeds_beta: bool,
    /// Variables that must be added before the treatment can be offered.
    pub requires: Vec<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub incumbent: Incumbent,
    pub candidates: Vec<String>,
    pub challengers: Vec<Challenger>,
    pub verdict: Verdict,
    /// Smallest β − value over challengers that do not exceed β.
    pub margin: Option<f64>,
    /// Time index whose tables give the highest exceeding challenger.
    pub target_time: Option<String>,
    /// Touched and total node counts behind a topology verdict.
    pub cost: Option<(usize, usize)>,
}

impl SensitivityReport {
    /// Exceeding challengers at the target time.
    pub fn target_exceeders(&self) -> Vec<&Challenger> {
        self.challengers
            .iter()
            .filter(|c| c.exceeds_beta && Some(&c.time) == self.target_time.as_ref())
            .collect()
    }
}

/// Axis indices within `window` positions of `t`, in axis order.
pub fn default_candidates(kb: &KnowledgeBase, t: &str, window: usize) -> Vec<String> {
    kb.time_axis.window(t, window)
}

/// Re-evaluates every treatment outside the incumbent's class under the
/// tables of each candidate time, against the incumbent's β at `t`.
pub fn analyze(
    d: &InfluenceDiagram,
    kb: &KnowledgeBase,
    t: &str,
    candidates: &[String],
    partition: &EquivalencePartition,
) -> Result<SensitivityReport, SensitivityError> {
    analyze_with(d, kb, t, candidates, partition, REBUILD_THRESHOLD)
}

pub fn analyze_with(
    d: &InfluenceDiagram,
    kb: &KnowledgeBase,
    t: &str,
    candidates: &[String],
    partition: &EquivalencePartition,
    rebuild_threshold: f64,
) -> Result<SensitivityReport, SensitivityError> {
    if !kb.time_axis.contains(t) {
        return Err(SensitivityError::UnknownTime(t.to_string()));
    }
    for c in candidates {
        if !kb.time_axis.contains(c) {
            return Err(SensitivityError::UnknownTime(c.clone()));
        }
    }
    let report = best_decision(d, partition)?;
    let incumbent = Incumbent {
        treatment: report.best_treatment.clone(),
        beta: report.best_value,
        time: t.to_string(),
        class: report.best_class,
    };
    let candidates: Vec<String> = kb.time_axis.labels.iter().filter(|l| candidates.contains(l)).cloned().collect();
    let offered: Vec<String> = d.current_decision().map(|x| x.alternatives.clone()).unwrap_or_default();
    let rivals: Vec<String> = offered
        .iter()
        .filter(|x| **x != incumbent.treatment)
        .filter(|x| {
            let c = partition.class_of_treatment(x);
            incumbent.class.is_none() || c.is_none() || c != incumbent.class
        })
        .cloned()
        .collect();
    let present: BTreeSet<String> = d.chance.keys().cloned().collect();
    let absent: Vec<(String, Vec<String>)> = kb
        .treatments
        .iter()
        .filter(|x| !offered.contains(&x.name))
        .filter_map(|x| {
            let needs: Vec<String> = kb
                .utilities
                .touched_vars(&x.name)
                .into_iter()
                .filter(|v| !present.contains(v) && kb.variable(v).is_some_and(|k| k.role == Role::Hypothesis))
                .collect();
            (!needs.is_empty()).then(|| (x.name.clone(), needs))
        })
        .collect();

    let mut challengers = Vec::new();
    for time in &candidates {
        let at_time = update_probabilities(d, kb, time);
        let values = at_time.as_ref().map_err(|e| e.to_string()).and_then(|dt| expected_utilities(dt).map_err(|e| e.to_string()));
        for x in &rivals {
            let (value, error) = match &values {
                Ok(v) => (v.get(x).copied(), None),
                Err(e) => (None, Some(e.clone())),
            };
            challengers.push(Challenger {
                time: time.clone(),
                treatment: x.clone(),
                class: partition.class_of_treatment(x),
                exceeds_beta: value.is_some_and(|v| v > incumbent.beta),
                value,
                requires: Vec::new(),
                error,
            });
        }
        for (x, needs) in &absent {
            let value = at_time
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|dt| extend_topology(dt, kb, &needs.iter().cloned().collect(), time).map_err(|e| e.to_string()))
                .and_then(|ext| expected_utilities(&ext).map_err(|e| e.to_string()))
                .and_then(|v| v.get(x).copied().ok_or_else(|| format!("{x} is not offered after extension")));
            let (value, error) = match value {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e)),
            };
            challengers.push(Challenger {
                time: time.clone(),
                treatment: x.clone(),
                class: None,
                exceeds_beta: value.is_some_and(|v| v > incumbent.beta),
                value,
                requires: needs.clone(),
                error,
            });
        }
    }

    let margin = challengers
        .iter()
        .filter(|c| !c.exceeds_beta)
        .filter_map(|c| c.value.map(|v| incumbent.beta - v))
        .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.min(m))));
    let target_time = challengers
        .iter()
        .filter(|c| c.exceeds_beta)
        .fold(None::<&Challenger>, |best, c| match best {
            Some(b) if b.value >= c.value => Some(b),
            _ => Some(c),
        })
        .map(|c| c.time.clone());
    let mut out = SensitivityReport {
        incumbent,
        candidates,
        challengers,
        verdict: Verdict::NoUpdate,
        margin,
        target_time,
        cost: None,
    };
    let (verdict, cost) = classify(&out, d, kb, rebuild_threshold);
    out.verdict = verdict;
    out.cost = cost;
    Ok(out)
}

/// The kind of update the report's exceeding challengers call for.
pub fn classify_update(report: &SensitivityReport, d: &InfluenceDiagram, kb: &KnowledgeBase) -> Verdict {
    classify(report, d, kb, REBUILD_THRESHOLD).0
}

fn representable(d: &InfluenceDiagram, kb: &KnowledgeBase, treatment: &str) -> bool {
    let u = &kb.utilities;
    let literals = u
        .literal_entries
        .iter()
        .filter(|l| l.treatment == treatment)
        .map(|l| (&l.var, &l.state))
        .chain(u.override_entries.iter().filter(|o| o.treatment == treatment).flat_map(|o| o.assignment.iter().map(|(v, s)| (v, s))));
    let mut all = true;
    for (v, s) in literals {
        all &= d.chance.get(v).is_some_and(|n| n.state_index(s).is_some());
    }
    all && d.current_decision().is_some_and(|x| x.alternatives.iter().any(|a| a == treatment))
}

fn classify(report: &SensitivityReport, d: &InfluenceDiagram, kb: &KnowledgeBase, threshold: f64) -> (Verdict, Option<(usize, usize)>) {
    let exceeders = report.target_exceeders();
    if exceeders.is_empty() {
        return (Verdict::NoUpdate, None);
    }
    if exceeders.iter().all(|c| c.requires.is_empty() && representable(d, kb, &c.treatment)) {
        return (Verdict::ValuesOnly, None);
    }
    let required: BTreeSet<String> = exceeders.iter().flat_map(|c| c.requires.iter().cloned()).collect();
    let restored = exceeders
        .iter()
        .flat_map(|c| kb.utilities.touched_vars(&c.treatment))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|v| matches!((d.chance.get(v), kb.variable(v)), (Some(n), Some(k)) if n.states != k.states))
        .count();
    let (cost, total) = estimate_cost(d, kb, &required, restored);
    let verdict = if (cost as f64) > threshold * (total as f64) { Verdict::Reinstantiate } else { Verdict::Topology };
    (verdict, Some((cost, total)))
}
