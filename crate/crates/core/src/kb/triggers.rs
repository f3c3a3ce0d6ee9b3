use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{KbError, KnowledgeBase, TriggerRule};

/// One entry of an event log: `var` was seen in `state` at `time`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub time: String,
    pub var: String,
    pub state: String,
}

impl Event {
    pub fn new(time: &str, var: &str, state: &str) -> Self {
        Self { time: time.to_string(), var: var.to_string(), state: state.to_string() }
    }
}

/// A rule matched the log starting at event `start` and completing at `end`
/// (indices into the log).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Firing {
    pub rule: String,
    pub start: usize,
    pub end: usize,
}

/// Checks that every event names a known literal and time, and that times never decrease.
pub(crate) fn check_log(kb: &KnowledgeBase, log: &[Event]) -> Result<Vec<usize>, KbError> {
    let mut positions = Vec::with_capacity(log.len());
    for (i, e) in log.iter().enumerate() {
        let var = kb.variable(&e.var).ok_or_else(|| KbError::UnknownVariable(e.var.clone()))?;
        if var.state_index(&e.state).is_none() {
            return Err(KbError::UnknownState { var: e.var.clone(), state: e.state.clone() });
        }
        let pos = kb.time_axis.position(&e.time).ok_or_else(|| KbError::UnknownTime(e.time.clone()))?;
        if positions.last().is_some_and(|&p| p > pos) {
            return Err(KbError::UnorderedLog(i));
        }
        positions.push(pos);
    }
    Ok(positions)
}

/// Every (rule, start) pair whose pattern matches a subsequence of the log
/// beginning at `start`, reported with its earliest completion. Sorted by
/// start, then end, then rule declaration order.
pub fn match_triggers(kb: &KnowledgeBase, log: &[Event]) -> Result<Vec<Firing>, KbError> {
    let positions = check_log(kb, log)?;
    let mut firings = Vec::new();
    for (order, rule) in kb.triggers.iter().enumerate() {
        for start in 0..log.len() {
            if let Some(end) = earliest_completion(rule, log, &positions, start) {
                firings.push((start, end, order, Firing { rule: rule.name.clone(), start, end }));
            }
        }
    }
    firings.sort_by_key(|(s, e, o, _)| (*s, *e, *o));
    Ok(firings.into_iter().map(|(_, _, _, f)| f).collect())
}

fn earliest_completion(rule: &TriggerRule, log: &[Event], positions: &[usize], start: usize) -> Option<usize> {
    let matches = |step: &super::TriggerStep, e: &Event| step.var == e.var && step.state == e.state;
    let first = rule.pattern.first()?;
    if !matches(first, &log[start]) {
        return None;
    }
    let mut reach = BTreeSet::from([start]);
    for step in &rule.pattern[1..] {
        let gap = step.within.unwrap_or(usize::MAX);
        let mut next = BTreeSet::new();
        for &r in &reach {
            for j in r + 1..log.len() {
                if positions[j] - positions[r] > gap {
                    break;
                }
                if matches(step, &log[j]) {
                    next.insert(j);
                }
            }
        }
        if next.is_empty() {
            return None;
        }
        reach = next;
    }
    reach.first().copied()
}
