mod common;

use std::sync::Arc;

use common::{fixture_path, load};
use tempdx_core::construct::{instantiate, ObservationSet};
use tempdx_core::equivalence::{partition_for, DEFAULT_QUANTUM};
use tempdx_core::inference::best_decision;
use tempdx_core::kb::{justification_trace, validate_kb};
use tempdx_core::report::{Recommendation, Report, SessionSummary};
use tempdx_core::sensitivity::{analyze, default_candidates};
use tempdx_core::session::{parse_script, replay};
use tempdx_core::update::plan_update;

#[test]
fn every_kind_round_trips() {
    let kb = load("abdominal.kb");
    let (d, trace) = instantiate(&kb, &ObservationSet::at("t1", &[("N", "yes"), ("P", "yes")]), "t1").unwrap();
    let partition = partition_for(&d, DEFAULT_QUANTUM);
    let decision = best_decision(&d, &partition).unwrap();
    let sensitivity = analyze(&d, &kb, "t1", &default_candidates(&kb, "t1", 2), &partition).unwrap();
    let plan = plan_update(&d, &kb, &sensitivity);
    let script = std::fs::read_to_string(fixture_path("appendicitis_session.txt")).unwrap();
    let session = replay(Arc::new(kb.clone()), &parse_script(&script).unwrap()).unwrap();
    let mut broken = load("car.kb");
    broken.arcs.push(("ST".into(), "W".into()));

    let reports = vec![
        Report::Validation { violations: validate_kb(&broken) },
        Report::Decision(decision.clone()),
        Report::Sensitivity(sensitivity.clone()),
        Report::Recommendation(Box::new(Recommendation { decision, sensitivity, trace: trace.clone() })),
        Report::Trace(trace),
        Report::Justification(justification_trace(&kb, "RLQ").unwrap()),
        Report::Plan(plan),
        Report::Diagram(d.snapshot()),
        Report::Session(SessionSummary::of(&session, Some("s1"))),
        Report::Snapshot { session: session.snapshot() },
        Report::Log { events: session.log.clone() },
        Report::error("time-regression", "t1 is before t3"),
    ];
    let mut kinds: Vec<&str> = reports.iter().map(Report::kind).collect();
    kinds.dedup();
    assert_eq!(kinds.len(), 12);
    for r in reports {
        let text = r.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["kind"], r.kind());
        let back = Report::from_json(&text).unwrap();
        assert_eq!(back, r, "{}", r.kind());
        assert_eq!(back.to_json(), text);
    }
}
