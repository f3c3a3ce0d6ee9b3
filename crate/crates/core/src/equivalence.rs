//! Possible-treatment spaces, strong equivalence of diagnoses and the
//! partition it induces.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagram::InfluenceDiagram;
use crate::inference::{diagnoses, Diagnosis};
use crate::kb::UtilityTable;

pub const DEFAULT_QUANTUM: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquivalenceError {
    #[error("diagnosis '{0}' is not in the treatment space")]
    UnknownDiagnosis(String),
}

/// A treatment, optionally paired with the quantized utility level it has for
/// a diagnosis.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TreatmentPair {
    pub treatment: String,
    pub level: Option<i64>,
}

/// The relation between diagnoses and their possible treatments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSpace {
    pub diagnoses: Vec<Diagnosis>,
    pub treatments: Vec<String>,
    /// (index into `diagnoses`, pair).
    pub pairs: BTreeSet<(usize, TreatmentPair)>,
    pub derived_from_utility: bool,
    pub quantum: Option<f64>,
}

impl TreatmentSpace {
    /// A space from explicit (diagnosis, treatment) pairs.
    pub fn from_pairs(diagnoses: Vec<Diagnosis>, treatments: Vec<String>, pairs: &[(usize, String)]) -> Self {
        let pairs = pairs
            .iter()
            .map(|(i, t)| (*i, TreatmentPair { treatment: t.clone(), level: None }))
            .collect();
        Self { diagnoses, treatments, pairs, derived_from_utility: false, quantum: None }
    }

    pub fn index_of(&self, d: &Diagnosis) -> Option<usize> {
        self.diagnoses.iter().position(|x| x.assignment == d.assignment)
    }

    /// Treatments possible for the diagnosis at `index`.
    pub fn treatment_set(&self, index: usize) -> BTreeSet<&TreatmentPair> {
        self.pairs.range((index, min_pair())..).take_while(|(i, _)| *i == index).map(|(_, p)| p).collect()
    }
}

fn min_pair() -> TreatmentPair {
    TreatmentPair { treatment: String::new(), level: None }
}

/// Utility level of `value` on a grid of step `quantum`. Values within 1e-9
/// steps of a grid point snap to it; others fall to the point below, so a grid
/// whose step is a multiple of `quantum` never separates values this one joins.
pub fn quantize(value: f64, quantum: f64) -> i64 {
    let y = value / quantum;
    let r = y.round();
    if (y - r).abs() < 1e-9 {
        r as i64
    } else {
        y.floor() as i64
    }
}

pub fn treatment_space_from_utilities(
    diagnoses: &[Diagnosis],
    treatments: &[String],
    utility: &UtilityTable,
    quantum: f64,
) -> TreatmentSpace {
    assert!(quantum > 0.0, "quantum must be positive");
    let mut pairs = BTreeSet::new();
    for (i, d) in diagnoses.iter().enumerate() {
        for t in treatments {
            let level = quantize(utility.value(t, &d.assignment), quantum);
            pairs.insert((i, TreatmentPair { treatment: t.clone(), level: Some(level) }));
        }
    }
    TreatmentSpace {
        diagnoses: diagnoses.to_vec(),
        treatments: treatments.to_vec(),
        pairs,
        derived_from_utility: true,
        quantum: Some(quantum),
    }
}

pub fn strongly_equivalent(p: &TreatmentSpace, d1: &Diagnosis, d2: &Diagnosis) -> Result<bool, EquivalenceError> {
    let i = p.index_of(d1).ok_or_else(|| EquivalenceError::UnknownDiagnosis(d1.label()))?;
    let j = p.index_of(d2).ok_or_else(|| EquivalenceError::UnknownDiagnosis(d2.label()))?;
    Ok(p.treatment_set(i) == p.treatment_set(j))
}

/// Class a treatment belongs to: the class of the diagnoses it serves best.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentClass {
    pub class: usize,
    /// The maximizing diagnoses span several classes; `class` is the lowest.
    pub tie: bool,
    pub candidates: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalencePartition {
    pub diagnoses: Vec<Diagnosis>,
    /// Indices into `diagnoses`, each class in ascending order; classes are
    /// ordered by their smallest member.
    pub classes: Vec<Vec<usize>>,
    pub class_of: Vec<usize>,
    pub treatment_class_of: BTreeMap<String, TreatmentClass>,
}

impl EquivalencePartition {
    pub fn class_of_diagnosis(&self, d: &Diagnosis) -> Option<usize> {
        self.diagnoses.iter().position(|x| x.assignment == d.assignment).map(|i| self.class_of[i])
    }

    pub fn class_of_treatment(&self, t: &str) -> Option<usize> {
        self.treatment_class_of.get(t).map(|c| c.class)
    }
}

pub fn partition_diagnoses(p: &TreatmentSpace, diagnoses: &[Diagnosis]) -> EquivalencePartition {
    let sets: Vec<BTreeSet<&TreatmentPair>> =
        diagnoses.iter().map(|d| p.index_of(d).map(|i| p.treatment_set(i)).unwrap_or_default()).collect();
    let mut classes: Vec<Vec<usize>> = Vec::new();
    let mut class_of = vec![0; diagnoses.len()];
    let mut by_set: BTreeMap<&BTreeSet<&TreatmentPair>, usize> = BTreeMap::new();
    for (i, s) in sets.iter().enumerate() {
        let c = *by_set.entry(s).or_insert_with(|| {
            classes.push(Vec::new());
            classes.len() - 1
        });
        classes[c].push(i);
        class_of[i] = c;
    }

    let mut treatment_class_of = BTreeMap::new();
    for t in &p.treatments {
        // Diagnoses where t reaches its highest level (or, for explicit
        // pairs, where t is possible at all).
        let levels: Vec<Option<Option<i64>>> = sets
            .iter()
            .map(|s| s.iter().find(|pair| pair.treatment == *t).map(|pair| pair.level))
            .collect();
        let best = levels.iter().flatten().max().copied();
        let Some(best) = best else { continue };
        let members: BTreeSet<usize> =
            levels.iter().enumerate().filter(|(_, l)| **l == Some(best)).map(|(i, _)| class_of[i]).collect();
        let candidates: Vec<usize> = members.into_iter().collect();
        treatment_class_of.insert(
            t.clone(),
            TreatmentClass { class: candidates[0], tie: candidates.len() > 1, candidates },
        );
    }
    EquivalencePartition { diagnoses: diagnoses.to_vec(), classes, class_of, treatment_class_of }
}

/// Partition of the diagram's diagnoses under its pending decision's utilities.
pub fn partition_for(d: &InfluenceDiagram, quantum: f64) -> EquivalencePartition {
    let dx = diagnoses(d);
    let (treatments, utility) = match (d.current_decision(), d.current_value()) {
        (Some(dec), Some(v)) => (dec.alternatives.clone(), v.utility.clone()),
        _ => (Vec::new(), UtilityTable::default()),
    };
    let space = treatment_space_from_utilities(&dx, &treatments, &utility, quantum);
    partition_diagnoses(&space, &dx)
}
