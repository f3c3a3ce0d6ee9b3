//! Kind-tagged JSON envelope for everything the engine reports to clients.

use serde::{Deserialize, Serialize};

use crate::construct::ConstructionTrace;
use crate::diagram::DiagramSnapshot;
use crate::inference::DecisionReport;
use crate::kb::{JustificationGraph, Violation};
use crate::sensitivity::SensitivityReport;
use crate::session::{DecisionRecord, PlanRecord, Session, SessionEvent};
use crate::update::UpdatePlan;

/// Session state as exposed to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: Option<String>,
    pub start_time: String,
    pub time: String,
    pub simulation: bool,
    pub events: usize,
    pub decisions: Vec<DecisionRecord>,
    pub accumulated_value: f64,
    pub awaiting_outcome: bool,
    pub pending_alternatives: Vec<String>,
    pub plans: Vec<PlanRecord>,
}

impl SessionSummary {
    pub fn of(s: &Session, id: Option<&str>) -> Self {
        Self {
            id: id.map(str::to_string),
            start_time: s.start_time.clone(),
            time: s.time.clone(),
            simulation: s.truth.is_some(),
            events: s.log.len(),
            decisions: s.decisions.clone(),
            accumulated_value: s.accumulated_value,
            awaiting_outcome: s.awaiting_outcome,
            pending_alternatives: s
                .diagram
                .as_ref()
                .and_then(|d| d.current_decision())
                .map(|x| x.alternatives.clone())
                .unwrap_or_default(),
            plans: s.plans.clone(),
        }
    }
}

/// The latest decision with its sensitivity analysis and construction trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub decision: DecisionReport,
    pub sensitivity: SensitivityReport,
    pub trace: ConstructionTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "kebab-case")]
pub enum Report {
    Validation { violations: Vec<Violation> },
    Decision(DecisionReport),
    Sensitivity(SensitivityReport),
    Recommendation(Box<Recommendation>),
    Trace(ConstructionTrace),
    Justification(JustificationGraph),
    Plan(UpdatePlan),
    Diagram(DiagramSnapshot),
    Session(SessionSummary),
    /// Full session state; replaying the session's script reproduces it exactly.
    Snapshot { session: serde_json::Value },
    Log { events: Vec<SessionEvent> },
    Error { code: String, message: String },
}

impl Report {
    pub fn kind(&self) -> &'static str {
        match self {
            Report::Validation { .. } => "validation",
            Report::Decision(_) => "decision",
            Report::Sensitivity(_) => "sensitivity",
            Report::Recommendation(_) => "recommendation",
            Report::Trace(_) => "trace",
            Report::Justification(_) => "justification",
            Report::Plan(_) => "plan",
            Report::Diagram(_) => "diagram",
            Report::Session(_) => "session",
            Report::Snapshot { .. } => "snapshot",
            Report::Log { .. } => "log",
            Report::Error { .. } => "error",
        }
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Report::Error { code: code.to_string(), message: message.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports are serializable")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}
