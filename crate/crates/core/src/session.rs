//! The sequential diagnostic loop: observations, decisions and outcomes over
//! time, with the sensitivity and update pipeline run after each step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::construct::{assign_with_trace, decision_and_value, included_by_triggers, instantiate, ConstructError, ConstructionTrace, ObservationSet};
use crate::diagram::InfluenceDiagram;
use crate::equivalence::{partition_for, DEFAULT_QUANTUM};
use crate::inference::{best_decision, DecisionReport, InferenceError};
use crate::kb::{match_triggers, Event, KnowledgeBase, Role, TreatmentKind};
use crate::sensitivity::{analyze_with, default_candidates, SensitivityError, SensitivityReport, Verdict, DEFAULT_WINDOW};
use crate::update::{
    apply_plan, coarsen_node, estimate_cost, extend_topology, nodes_to_add, plan_update_with, refine_node, reinstantiate,
    CoarseningMap, PlannedStep, RefinementMap, UpdateError, UpdatePlan, UpdateStep, REBUILD_THRESHOLD,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("time {given} is earlier than the session time {current}")]
    TimeRegression { given: String, current: String },
    #[error("unknown time index '{0}'")]
    UnknownTime(String),
    #[error("unknown variable '{0}'")]
    UnknownVariable(String),
    #[error("unknown state '{state}' for '{var}'")]
    UnknownState { var: String, state: String },
    #[error("'{0}' is a hypothesis and cannot be observed")]
    NotObservable(String),
    #[error("'{0}' is not an alternative of the pending decision")]
    UnknownAlternative(String),
    #[error("no diagram yet: observe something first")]
    NoDiagram,
    #[error("feedback needs a decision to have been taken")]
    NoDecision,
    #[error("unknown template '{0}'")]
    UnknownTemplate(String),
    #[error("invalid truth assignment: {0}")]
    BadTruth(String),
    #[error("construction failed: {0}")]
    Construct(#[from] ConstructError),
    #[error("inference failed: {0}")]
    Inference(#[from] InferenceError),
    #[error("sensitivity analysis failed: {0}")]
    Sensitivity(#[from] SensitivityError),
    #[error("update failed: {0}")]
    Update(#[from] UpdateError),
}

impl SessionError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::TimeRegression { .. } => "time-regression",
            SessionError::UnknownTime(_) => "unknown-time",
            SessionError::UnknownVariable(_) => "unknown-variable",
            SessionError::UnknownState { .. } => "unknown-state",
            SessionError::NotObservable(_) => "not-observable",
            SessionError::UnknownAlternative(_) => "unknown-alternative",
            SessionError::NoDiagram => "no-diagram",
            SessionError::NoDecision => "no-decision",
            SessionError::UnknownTemplate(_) => "unknown-template",
            SessionError::BadTruth(_) => "bad-truth",
            SessionError::Construct(_) => "construction-failed",
            SessionError::Inference(InferenceError::ZeroProbabilityEvidence(_)) => "zero-probability",
            SessionError::Inference(_) => "inference-failed",
            SessionError::Sensitivity(_) => "sensitivity-failed",
            SessionError::Update(UpdateError::Rejected { .. }) => "coarsening-rejected",
            SessionError::Update(_) => "update-failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    Observe { var: String, state: String },
    Decide { choice: String },
    Outcome { var: String, state: String },
    Refine { template: String },
    Coarsen { template: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub time: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub seq: u64,
    pub treatment: String,
    pub is_test: bool,
    pub report: DecisionReport,
    pub sub_value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanCause {
    /// Observed variables or trigger-included hypotheses missing from the diagram.
    Admission,
    /// The sensitivity verdict after feedback.
    Feedback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub seq: u64,
    pub cause: PlanCause,
    pub plan: UpdatePlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceChange {
    pub seq: u64,
    pub var: String,
    pub from: String,
    pub to: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub quantum: f64,
    pub window: usize,
    pub rebuild_threshold: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { quantum: DEFAULT_QUANTUM, window: DEFAULT_WINDOW, rebuild_threshold: REBUILD_THRESHOLD }
    }
}

/// Session state. Serializing it gives the snapshot compared by replay tests.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Session {
    #[serde(skip)]
    kb: Arc<KnowledgeBase>,
    pub config: SessionConfig,
    pub start_time: String,
    pub time: String,
    /// Known true diagnosis; when set, realized sub-values are μ(truth, T).
    pub truth: Option<BTreeMap<String, String>>,
    pub log: Vec<SessionEvent>,
    pub diagram: Option<InfluenceDiagram>,
    pub decisions: Vec<DecisionRecord>,
    pub accumulated_value: f64,
    pub awaiting_outcome: bool,
    pub recommendation: Option<DecisionReport>,
    pub sensitivity: Option<SensitivityReport>,
    pub trace: Option<ConstructionTrace>,
    pub plans: Vec<PlanRecord>,
    pub evidence_changes: Vec<EvidenceChange>,
}

/// A session as plain data, for comparison and transport.
pub type SessionSnapshot = serde_json::Value;

impl Session {
    pub fn new(kb: Arc<KnowledgeBase>, t0: &str) -> Result<Self, SessionError> {
        Self::with_config(kb, t0, SessionConfig::default())
    }

    pub fn with_config(kb: Arc<KnowledgeBase>, t0: &str, config: SessionConfig) -> Result<Self, SessionError> {
        if !kb.time_axis.contains(t0) {
            return Err(SessionError::UnknownTime(t0.to_string()));
        }
        Ok(Self {
            kb,
            config,
            start_time: t0.to_string(),
            time: t0.to_string(),
            truth: None,
            log: Vec::new(),
            diagram: None,
            decisions: Vec::new(),
            accumulated_value: 0.0,
            awaiting_outcome: false,
            recommendation: None,
            sensitivity: None,
            trace: None,
            plans: Vec::new(),
            evidence_changes: Vec::new(),
        })
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    /// Switches to simulation mode with a known diagnosis.
    pub fn set_truth(&mut self, truth: BTreeMap<String, String>) -> Result<(), SessionError> {
        for (v, s) in &truth {
            let var = self.kb.variable(v).ok_or_else(|| SessionError::UnknownVariable(v.clone()))?;
            if var.role != Role::Hypothesis {
                return Err(SessionError::BadTruth(format!("{v} is not a hypothesis")));
            }
            if var.state_index(s).is_none() {
                return Err(SessionError::UnknownState { var: v.clone(), state: s.clone() });
            }
        }
        self.truth = Some(truth);
        Ok(())
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        serde_json::to_value(self).expect("session state is serializable")
    }

    /// The latest reports. Pure read.
    pub fn recommend(&self) -> Result<(&DecisionReport, &SensitivityReport, &ConstructionTrace), SessionError> {
        match (&self.recommendation, &self.sensitivity, &self.trace) {
            (Some(r), Some(s), Some(t)) => Ok((r, s, t)),
            _ => Err(SessionError::NoDiagram),
        }
    }

    /// Observations and outcomes as a KB event log (states outside the KB's
    /// state spaces, from refined nodes, are left out).
    pub fn observations(&self) -> Vec<Event> {
        self.log
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::Observe { var, state } | EventKind::Outcome { var, state } => Some(Event::new(&e.time, var, state)),
                _ => None,
            })
            .filter(|e| self.kb.variable(&e.var).is_some_and(|v| v.state_index(&e.state).is_some()))
            .collect()
    }

    fn next_seq(&self) -> u64 {
        self.log.last().map_or(1, |e| e.seq + 1)
    }

    fn check_time(&self, t: &str) -> Result<(), SessionError> {
        let axis = &self.kb.time_axis;
        let pos = axis.position(t).ok_or_else(|| SessionError::UnknownTime(t.to_string()))?;
        if pos < axis.position(&self.time).unwrap() {
            return Err(SessionError::TimeRegression { given: t.to_string(), current: self.time.clone() });
        }
        Ok(())
    }

    fn check_literal(&self, var: &str, state: &str) -> Result<(), SessionError> {
        let v = self.kb.variable(var).ok_or_else(|| SessionError::UnknownVariable(var.to_string()))?;
        if v.role == Role::Hypothesis {
            return Err(SessionError::NotObservable(var.to_string()));
        }
        let known = match self.diagram.as_ref().and_then(|d| d.chance.get(var)) {
            Some(n) => n.state_index(state).is_some(),
            None => v.state_index(state).is_some(),
        };
        if !known {
            return Err(SessionError::UnknownState { var: var.to_string(), state: state.to_string() });
        }
        Ok(())
    }

    /// Runs `f` on a copy and keeps the result only if it succeeds.
    fn transact(&mut self, f: impl FnOnce(&mut Session) -> Result<(), SessionError>) -> Result<(), SessionError> {
        let mut next = self.clone();
        f(&mut next)?;
        *self = next;
        Ok(())
    }

    pub fn observe(&mut self, var: &str, state: &str, t: &str) -> Result<(), SessionError> {
        self.check_literal(var, state)?;
        self.check_time(t)?;
        let kind = EventKind::Observe { var: var.to_string(), state: state.to_string() };
        self.transact(|s| s.absorb(kind, var, state, t, false))
    }

    pub fn feedback(&mut self, var: &str, state: &str, t: &str) -> Result<(), SessionError> {
        if self.decisions.is_empty() {
            return Err(SessionError::NoDecision);
        }
        self.check_literal(var, state)?;
        self.check_time(t)?;
        let kind = EventKind::Outcome { var: var.to_string(), state: state.to_string() };
        self.transact(|s| s.absorb(kind, var, state, t, true))
    }

    fn absorb(&mut self, kind: EventKind, var: &str, state: &str, t: &str, full_pipeline: bool) -> Result<(), SessionError> {
        let seq = self.next_seq();
        let advanced = self.kb.time_axis.position(t) > self.kb.time_axis.position(&self.time);
        let previous = self.log.iter().rev().find_map(|e| match &e.kind {
            EventKind::Observe { var: v, state: s } | EventKind::Outcome { var: v, state: s } if v == var => Some(s.clone()),
            _ => None,
        });
        if let Some(prev) = previous.filter(|p| p != state) {
            self.evidence_changes.push(EvidenceChange { seq, var: var.to_string(), from: prev, to: state.to_string() });
        }
        self.log.push(SessionEvent { seq, time: t.to_string(), kind });
        self.time = t.to_string();
        let events = self.observations();
        let d = match self.diagram.take() {
            None => match instantiate(&self.kb, &ObservationSet::new(events.clone()), t) {
                Ok((d, _)) => d,
                // Nothing treatable is in view yet; construction waits for more evidence.
                Err(ConstructError::NoTreatments) => return Ok(()),
                Err(e) => return Err(e.into()),
            },
            Some(d) => {
                let model_time = if advanced { t.to_string() } else { d.time.clone() };
                let mut d = self.admit(d, var, seq, &model_time, &events)?;
                d.evidence.insert(var.to_string(), state.to_string());
                d.time = model_time;
                d
            }
        };
        self.awaiting_outcome = false;
        let model_time = d.time.clone();
        let (mut d, _) = assign_with_trace(&self.kb, &d, &model_time, &events)?;
        if full_pipeline {
            let partition = partition_for(&d, self.config.quantum);
            let report = self.analyze(&d)?;
            if report.verdict != Verdict::NoUpdate {
                let plan = plan_update_with(&d, &self.kb, &report, self.config.rebuild_threshold);
                d = apply_plan(&d, &self.kb, &plan, &events, &partition)?;
                self.plans.push(PlanRecord { seq, cause: PlanCause::Feedback, plan });
            }
        }
        self.evaluate(d)
    }

    /// Adds observed variables and trigger-included hypotheses the diagram lacks,
    /// by extension or, when that touches too much, by rebuilding.
    fn admit(&mut self, d: InfluenceDiagram, var: &str, seq: u64, t: &str, events: &[Event]) -> Result<InfluenceDiagram, SessionError> {
        let firings = match_triggers(&self.kb, events).map_err(ConstructError::from)?;
        let mut required: BTreeSet<String> = included_by_triggers(&self.kb, &firings);
        required.insert(var.to_string());
        required.retain(|r| !d.chance.contains_key(r));
        if required.is_empty() {
            return Ok(d);
        }
        let (cost, total) = estimate_cost(&d, &self.kb, &required, 0);
        let rebuild = (cost as f64) > self.config.rebuild_threshold * (total as f64);
        let (d, plan) = if rebuild {
            let mut include: BTreeSet<String> = d.hypothesis_names().into_iter().collect();
            include.extend(required.iter().filter(|r| self.kb.variable(r).is_some_and(|v| v.role == Role::Hypothesis)).cloned());
            let rebuilt = reinstantiate(&self.kb, events, t, &include, Some(&d))?;
            let step = UpdateStep::Reinstantiate { time: t.to_string(), include: include.into_iter().collect() };
            (rebuilt, UpdatePlan {
                verdict: Verdict::Reinstantiate,
                steps: vec![PlannedStep { step, rationale: format!("admitting new variables would touch {cost} of {total} nodes") }],
                cost_estimate: cost,
                total_nodes: total,
            })
        } else {
            let nodes = nodes_to_add(&d, &self.kb, &required);
            let extended = extend_topology(&d, &self.kb, &required, t)?;
            let step = UpdateStep::AddNodes { required: required.iter().cloned().collect(), nodes, time: t.to_string() };
            (extended, UpdatePlan {
                verdict: Verdict::Topology,
                steps: vec![PlannedStep { step, rationale: "observation or trigger names variables outside the diagram".into() }],
                cost_estimate: cost,
                total_nodes: total,
            })
        };
        self.plans.push(PlanRecord { seq, cause: PlanCause::Admission, plan });
        Ok(d)
    }

    fn analyze(&self, d: &InfluenceDiagram) -> Result<SensitivityReport, SessionError> {
        let partition = partition_for(d, self.config.quantum);
        let candidates = default_candidates(&self.kb, &d.time, self.config.window);
        Ok(analyze_with(d, &self.kb, &d.time, &candidates, &partition, self.config.rebuild_threshold)?)
    }

    /// Recomputes the stored reports for `d` and installs it.
    fn evaluate(&mut self, d: InfluenceDiagram) -> Result<(), SessionError> {
        let events = self.observations();
        let (d, trace) = assign_with_trace(&self.kb, &d, &d.time.clone(), &events)?;
        let partition = partition_for(&d, self.config.quantum);
        self.recommendation = Some(best_decision(&d, &partition)?);
        self.sensitivity = Some(self.analyze(&d)?);
        self.trace = Some(trace);
        self.diagram = Some(d);
        Ok(())
    }

    /// Takes `choice` at the pending decision and opens the next one.
    pub fn act(&mut self, choice: &str) -> Result<(), SessionError> {
        let d = self.diagram.as_ref().ok_or(SessionError::NoDiagram)?;
        let dec = d.current_decision().ok_or(SessionError::NoDiagram)?;
        if !dec.alternatives.iter().any(|a| a == choice) {
            return Err(SessionError::UnknownAlternative(choice.to_string()));
        }
        let report = self.recommendation.clone().ok_or(SessionError::NoDiagram)?;
        let is_test = dec.tests.iter().any(|x| x == choice)
            || self.kb.treatment(choice).is_some_and(|x| x.kind == TreatmentKind::Test);
        let sub_value = match &self.truth {
            Some(truth) => d.current_value().map_or(0.0, |v| v.utility.value(choice, truth)),
            None => report.per_treatment[choice],
        };
        let seq = self.next_seq();
        let mut d = d.clone();
        let alternatives = dec.alternatives.clone();
        d.decisions.last_mut().unwrap().chosen = Some(choice.to_string());
        let (next_dec, next_val) = decision_and_value(&self.kb, d.decisions.len() + 1, &alternatives);
        d.decisions.push(next_dec);
        d.values.push(next_val);
        self.log.push(SessionEvent { seq, time: self.time.clone(), kind: EventKind::Decide { choice: choice.to_string() } });
        self.decisions.push(DecisionRecord { seq, treatment: choice.to_string(), is_test, report, sub_value });
        self.accumulated_value += sub_value;
        self.awaiting_outcome = is_test;
        if let Some(s) = &mut self.sensitivity {
            s.incumbent.time = self.time.clone();
        }
        self.diagram = Some(d);
        Ok(())
    }

    /// Applies a KB refinement template to the diagram.
    pub fn refine(&mut self, template: &str) -> Result<(), SessionError> {
        let t = self.kb.refinement(template).ok_or_else(|| SessionError::UnknownTemplate(template.to_string()))?.clone();
        let d = self.diagram.clone().ok_or(SessionError::NoDiagram)?;
        self.transact(|s| {
            let seq = s.next_seq();
            let out = refine_node(&d, &RefinementMap::from_template(&t))?;
            s.log.push(SessionEvent { seq, time: s.time.clone(), kind: EventKind::Refine { template: template.to_string() } });
            s.evaluate(out)
        })
    }

    /// Applies a KB coarsening template, subject to the acceptance rule.
    pub fn coarsen(&mut self, template: &str) -> Result<(), SessionError> {
        let t = self.kb.coarsening(template).ok_or_else(|| SessionError::UnknownTemplate(template.to_string()))?.clone();
        let d = self.diagram.clone().ok_or(SessionError::NoDiagram)?;
        self.transact(|s| {
            let seq = s.next_seq();
            let partition = partition_for(&d, s.config.quantum);
            let out = coarsen_node(&d, &CoarseningMap::from_template(&t), &partition)?;
            s.log.push(SessionEvent { seq, time: s.time.clone(), kind: EventKind::Coarsen { template: template.to_string() } });
            s.evaluate(out.diagram)
        })
    }

    pub fn run(&mut self, cmd: &Command) -> Result<(), SessionError> {
        match cmd {
            Command::Start { time } => {
                if !self.log.is_empty() {
                    return Err(SessionError::TimeRegression { given: time.clone(), current: self.time.clone() });
                }
                *self = Session::with_config(self.kb.clone(), time, self.config.clone())?.with_truth(self.truth.clone());
                Ok(())
            }
            Command::Truth(t) => self.set_truth(t.clone()),
            Command::Observe { var, state, time } => self.observe(var, state, time),
            Command::Act { choice } => self.act(choice),
            Command::Feedback { var, state, time } => self.feedback(var, state, time),
            Command::Refine { template } => self.refine(template),
            Command::Coarsen { template } => self.coarsen(template),
        }
    }

    fn with_truth(mut self, truth: Option<BTreeMap<String, String>>) -> Self {
        self.truth = truth;
        self
    }

    /// Script lines that set up this session before its first event.
    pub fn script_header(&self) -> String {
        let mut out = format!("start {}\n", self.start_time);
        if let Some(t) = &self.truth {
            let lits: Vec<String> = t.iter().map(|(v, s)| format!("{v}={s}")).collect();
            let _ = writeln!(out, "truth {}", lits.join(","));
        }
        out
    }

    /// A script that replays this session.
    pub fn script(&self) -> String {
        let mut out = self.script_header();
        for e in &self.log {
            out.push_str(&script_line(e));
            out.push('\n');
        }
        out
    }
}

/// The script line that reproduces `e`.
pub fn script_line(e: &SessionEvent) -> String {
    match &e.kind {
        EventKind::Observe { var, state } => format!("observe {var}={state} @ {}", e.time),
        EventKind::Outcome { var, state } => format!("feedback {var}={state} @ {}", e.time),
        EventKind::Decide { choice } => format!("act {choice}"),
        EventKind::Refine { template } => format!("refine {template}"),
        EventKind::Coarsen { template } => format!("coarsen {template}"),
    }
}

/// One line of a session script.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    Start { time: String },
    Truth(BTreeMap<String, String>),
    Observe { var: String, state: String, time: String },
    Act { choice: String },
    Feedback { var: String, state: String, time: String },
    Refine { template: String },
    Coarsen { template: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("script line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

fn parse_literal(s: &str) -> Option<(String, String)> {
    let (v, st) = s.split_once('=')?;
    let (v, st) = (v.trim(), st.trim());
    (!v.is_empty() && !st.is_empty()).then(|| (v.to_string(), st.to_string()))
}

/// Parses `observe v=s @ t`, `act c`, `feedback v=s @ t`, `refine name`,
/// `coarsen name`, `start t` and `truth v=s,...` lines; `#` starts a comment.
pub fn parse_script(text: &str) -> Result<Vec<Command>, ScriptError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: &str| ScriptError { line: i + 1, message: m.to_string() };
        let (verb, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        let timed = |rest: &str| -> Result<(String, String, String), ScriptError> {
            let (lit, time) = rest.split_once('@').ok_or_else(|| err("expected '<var>=<state> @ <time>'"))?;
            let (v, s) = parse_literal(lit).ok_or_else(|| err("expected '<var>=<state>'"))?;
            let time = time.trim();
            if time.is_empty() || time.contains(char::is_whitespace) {
                return Err(err("expected a time label"));
            }
            Ok((v, s, time.to_string()))
        };
        let word = |rest: &str, what: &str| -> Result<String, ScriptError> {
            if rest.is_empty() || rest.contains(char::is_whitespace) {
                Err(err(&format!("expected {what}")))
            } else {
                Ok(rest.to_string())
            }
        };
        let cmd = match verb {
            "observe" => {
                let (var, state, time) = timed(rest)?;
                Command::Observe { var, state, time }
            }
            "feedback" => {
                let (var, state, time) = timed(rest)?;
                Command::Feedback { var, state, time }
            }
            "act" => Command::Act { choice: word(rest, "a treatment name")? },
            "refine" => Command::Refine { template: word(rest, "a template name")? },
            "coarsen" => Command::Coarsen { template: word(rest, "a template name")? },
            "start" => Command::Start { time: word(rest, "a time label")? },
            "truth" => {
                let mut map = BTreeMap::new();
                for lit in rest.split(',') {
                    let (v, s) = parse_literal(lit).ok_or_else(|| err("expected '<var>=<state>,...'"))?;
                    map.insert(v, s);
                }
                Command::Truth(map)
            }
            other => return Err(err(&format!("unknown command '{other}'"))),
        };
        out.push(cmd);
    }
    Ok(out)
}

/// Runs a script through a fresh session starting at the first axis index.
pub fn replay(kb: Arc<KnowledgeBase>, commands: &[Command]) -> Result<Session, (usize, SessionError)> {
    let t0 = kb.time_axis.labels.first().cloned().unwrap_or_default();
    let mut s = Session::new(kb, &t0).map_err(|e| (0, e))?;
    for (i, c) in commands.iter().enumerate() {
        s.run(c).map_err(|e| (i, e))?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_round_trip() {
        let text = "start t1\ntruth A=yes\nobserve N=yes @ t1\nact Diovol # comment\nfeedback P=yes @ t3\nrefine r\ncoarsen c\n";
        let cmds = parse_script(text).unwrap();
        assert_eq!(cmds.len(), 7);
        assert_eq!(cmds[2], Command::Observe { var: "N".into(), state: "yes".into(), time: "t1".into() });
    }

    #[test]
    fn script_errors_carry_lines() {
        let err = parse_script("observe N=yes @ t1\nobserve N @ t1\n").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(parse_script("dance\n").is_err());
    }
}
