use std::fmt::Write;

use super::{KnowledgeBase, TreatmentKind, TriggerEffect};
use crate::cpt::config_states;

/// Canonical text form. `parse_kb(&to_text(kb))` reproduces `kb` for any valid KB.
pub(super) fn to_text(kb: &KnowledgeBase) -> String {
    let mut out = String::new();
    for v in &kb.variables {
        let _ = write!(out, "var {} role={} states={}", v.name, v.role.as_str(), v.states.join(","));
        if let Some(n) = &v.normal {
            let _ = write!(out, " normal={n}");
        }
        out.push('\n');
    }
    for (a, b) in &kb.arcs {
        let _ = writeln!(out, "arc {a} -> {b}");
    }
    let _ = writeln!(out, "time {}", kb.time_axis.labels.join(" "));
    for (key, cpt) in &kb.cpt_bank.entries {
        let _ = write!(out, "cpt {} @ {}", key.var, key.time);
        if let Some(tag) = &key.variant {
            let _ = write!(out, " variant={tag}");
        }
        out.push('\n');
        let parent_vars: Vec<_> = cpt.parents.iter().map(|p| kb.variable(p).expect("valid KB")).collect();
        let cards: Vec<usize> = parent_vars.iter().map(|p| p.states.len()).collect();
        for (i, row) in cpt.rows.iter().enumerate() {
            let states = config_states(i, &cards);
            let assignment: Vec<String> = parent_vars
                .iter()
                .zip(&states)
                .map(|(p, &s)| format!("{}={}", p.name, p.states[s]))
                .collect();
            let probs: Vec<String> = row.iter().map(|p| p.to_string()).collect();
            let _ = writeln!(out, "| {} : {}", assignment.join(","), probs.join(","));
        }
    }
    for t in &kb.treatments {
        match t.kind {
            TreatmentKind::Treatment => { let _ = writeln!(out, "treat {}", t.name); }
            TreatmentKind::Test => { let _ = writeln!(out, "treat {} kind=test", t.name); }
        }
    }
    for l in &kb.utilities.literal_entries {
        let _ = writeln!(out, "util {} {}={} : {}", l.treatment, l.var, l.state, l.value);
    }
    for o in &kb.utilities.override_entries {
        let lits: Vec<String> = o.assignment.iter().map(|(v, s)| format!("{v}={s}")).collect();
        let _ = writeln!(out, "util {} full {} : {}", o.treatment, lits.join(","), o.value);
    }
    for r in &kb.triggers {
        let _ = write!(out, "trigger {}:", r.name);
        for (i, step) in r.pattern.iter().enumerate() {
            if i == 0 {
                let _ = write!(out, " {}={}", step.var, step.state);
            } else {
                let _ = write!(out, " then {}={} within {}", step.var, step.state, step.within.unwrap_or(0));
            }
        }
        match &r.effect {
            TriggerEffect::Variant { var, tag } => { let _ = writeln!(out, " => variant({var},{tag})"); }
            TriggerEffect::Include { var } => { let _ = writeln!(out, " => include({var})"); }
        }
    }
    for r in &kb.refinements {
        let splits: Vec<String> = r
            .splits
            .iter()
            .map(|(s, parts)| {
                let parts: Vec<String> = parts.iter().map(|(n, w)| format!("{n}:{w}")).collect();
                format!("{s} -> {}", parts.join(","))
            })
            .collect();
        let _ = writeln!(out, "refine {} {}: {}", r.name, r.var, splits.join("; "));
    }
    for c in &kb.coarsenings {
        let merges: Vec<String> = c.merges.iter().map(|(n, g)| format!("{n} <- {}", g.join(","))).collect();
        let _ = writeln!(out, "coarsen {} {}: {}", c.name, c.var, merges.join("; "));
    }
    out
}
