//! Runs every acceptance criterion and prints one PASS/FAIL line for each.

#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{
    close, folded_joint, joint_by_key, load, merge_fixture, merge_xy, oracle_eu, oracle_marginal, perturb, random_diagram,
    random_refinement, random_script, rng, threshold_kb, DiagramShape,
};
use tempdx::server::{router, AppState};
use tempdx_core::construct::{instantiate, ObservationSet};
use tempdx_core::diagram::InfluenceDiagram;
use tempdx_core::equivalence::{partition_for, DEFAULT_QUANTUM};
use tempdx_core::inference::{best_decision, expected_utility, expected_utility_by_diagnosis, expected_utility_by_literals, posterior};
use tempdx_core::sensitivity::{analyze, Verdict};
use tempdx_core::session::{parse_script, replay};
use tempdx_core::update::{coarsen_node, extend_topology, proportional_fragments, refine_node, verify_refinement, UpdateError};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const DIAGRAMS: u64 = 200;
const REFINEMENTS: u64 = 100;
const SCRIPTS: u64 = 20;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn small_diagram(seed: u64) -> InfluenceDiagram {
    random_diagram(&mut rng(seed), DiagramShape { max_nodes: 10, max_states: 2, ..Default::default() })
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut checks = 0;
    for seed in 0..DIAGRAMS {
        let d = small_diagram(seed);
        for var in d.chance.keys() {
            let got = posterior(&d, std::slice::from_ref(var)).map_err(|e| format!("seed {seed}: {e}"))?.probs;
            for (g, w) in got.iter().zip(oracle_marginal(&d, var)) {
                ensure(close(*g, w, 1e-9), || format!("seed {seed} {var}: {g} vs {w}"))?;
                checks += 1;
            }
        }
        for t in &d.decisions[0].alternatives {
            let (g, w) = (expected_utility(&d, t).map_err(|e| e.to_string())?, oracle_eu(&d, t));
            ensure(close(g, w, 1e-9), || format!("seed {seed} EU({t}): {g} vs {w}"))?;
            checks += 1;
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!("{checks} values on {DIAGRAMS} diagrams in {:.2}s", took.as_secs_f64()))
}

fn utility_routes_agree() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..DIAGRAMS {
        let mut d = small_diagram(seed);
        d.values[0].utility.override_entries.clear();
        let u = d.values[0].utility.clone();
        for t in &d.decisions[0].alternatives {
            let a = expected_utility_by_diagnosis(&d, &u, t).map_err(|e| e.to_string())?;
            let b = expected_utility_by_literals(&d, &u, t).map_err(|e| e.to_string())?;
            ensure(close(a, b, 1e-9), || format!("seed {seed} {t}: {a} vs {b}"))?;
            worst = worst.max((a - b).abs());
        }
    }
    Ok(format!("max difference {worst:.1e}"))
}

fn refinement_soundness() -> Outcome {
    for seed in 0..REFINEMENTS {
        let mut r = rng(seed);
        let d = random_diagram(&mut r, DiagramShape { max_nodes: 10, ..Default::default() });
        let m = random_refinement(&mut r, &d);
        let f = proportional_fragments(&d, &m).map_err(|e| e.to_string())?;
        let violations = verify_refinement(&d, &m, &f).map_err(|e| e.to_string())?;
        ensure(violations.is_empty(), || format!("seed {seed}: {violations:?}"))?;
        let refined = refine_node(&d, &m).map_err(|e| format!("seed {seed}: {e}"))?;
        let folded = folded_joint(&refined, &m, &d);
        for (k, p) in joint_by_key(&d) {
            ensure(close(folded[&k], p, 1e-9), || format!("seed {seed}: joint at {k:?}"))?;
        }
        let children = d.children(&m.target);
        for (name, node) in &d.chance {
            if *name != m.target && !children.contains(name) {
                ensure(&refined.chance[name] == node, || format!("seed {seed}: {name} changed"))?;
            }
        }

        let bad = perturb(&d, &f, &m.target, &m.splits[0].0);
        let found = verify_refinement(&d, &m, &bad).map_err(|e| e.to_string())?;
        ensure(!found.is_empty(), || format!("seed {seed}: perturbed split verified"))?;
        let mut with = m.clone();
        with.fragments = Some(bad);
        ensure(matches!(refine_node(&d, &with), Err(UpdateError::Verification(_))), || format!("seed {seed}: perturbed split applied"))?;
    }
    Ok(format!("{REFINEMENTS} sound, {REFINEMENTS} perturbed rejected"))
}

fn refine_coarsen_round_trip() -> Outcome {
    for seed in 0..REFINEMENTS {
        let mut r = rng(seed + 10_000);
        let d = random_diagram(&mut r, DiagramShape { max_nodes: 10, ..Default::default() });
        let m = random_refinement(&mut r, &d);
        let refined = refine_node(&d, &m).map_err(|e| format!("seed {seed}: {e}"))?;
        let back = coarsen_node(&refined, &m.inverse(), &partition_for(&refined, DEFAULT_QUANTUM)).map_err(|e| format!("seed {seed}: {e}"))?;
        for (name, node) in &d.chance {
            let got = &back.diagram.chance[name];
            ensure(got.states == node.states && got.cpt.parents == node.cpt.parents, || format!("seed {seed}: {name} shape"))?;
            for (a, b) in got.cpt.rows.iter().flatten().zip(node.cpt.rows.iter().flatten()) {
                ensure(close(*a, *b, 1e-9), || format!("seed {seed}: {name} {a} vs {b}"))?;
            }
        }
    }
    Ok(format!("{REFINEMENTS} cases"))
}

fn coarsening_rule() -> Outcome {
    let lossy = merge_fixture(0.1);
    match coarsen_node(&lossy, &merge_xy(), &partition_for(&lossy, DEFAULT_QUANTUM)) {
        Err(UpdateError::Rejected { before, after }) => {
            ensure(before.best_treatment != after.best_treatment, || "rejection without a flip".into())?
        }
        other => return Err(format!("lossy merge not rejected: {other:?}")),
    }
    let lossless = merge_fixture(0.9);
    let partition = partition_for(&lossless, DEFAULT_QUANTUM);
    let before = best_decision(&lossless, &partition).map_err(|e| e.to_string())?;
    let out = coarsen_node(&lossless, &merge_xy(), &partition).map_err(|e| e.to_string())?;
    let after = out.after.ok_or("no decision after merge")?;
    ensure(after.best_treatment == before.best_treatment, || "choice changed".into())?;
    ensure(close(after.best_value, before.best_value, 1e-9), || format!("{} vs {}", after.best_value, before.best_value))?;
    Ok(format!("lossy rejected, lossless keeps {} at {:.4}", after.best_treatment, after.best_value))
}

fn threshold_verdict(p: f64) -> Result<Verdict, String> {
    let kb = threshold_kb(p);
    let (d, _) = instantiate(&kb, &ObservationSet::at("t1", &[("E", "yes")]), "t1").map_err(|e| e.to_string())?;
    let partition = partition_for(&d, DEFAULT_QUANTUM);
    Ok(analyze(&d, &kb, "t1", &["t2".to_string()], &partition).map_err(|e| e.to_string())?.verdict)
}

/// Expected utility of `t` in the diagram built at t2 with P(H=bad) = p.
fn line_at(p: f64, t: &str) -> Result<f64, String> {
    let kb = threshold_kb(p);
    let (d, _) = instantiate(&kb, &ObservationSet::at("t1", &[("E", "yes")]), "t2").map_err(|e| e.to_string())?;
    expected_utility(&d, t).map_err(|e| e.to_string())
}

fn threshold_crossover() -> Outcome {
    let (a0, a1) = (line_at(0.0, "T1")?, line_at(1.0, "T1")?);
    let (b0, b1) = (line_at(0.0, "T2")?, line_at(1.0, "T2")?);
    let crossover = (a0 - b0) / ((b1 - b0) - (a1 - a0));
    let mut flip = None;
    for i in 0..=10_000 {
        let p = i as f64 * 1e-4;
        if threshold_verdict(p)? != Verdict::NoUpdate {
            flip = Some(p);
            break;
        }
    }
    let flip = flip.ok_or("no flip on the sweep")?;
    ensure((flip - crossover).abs() <= 1e-3, || format!("flip {flip} vs crossover {crossover}"))?;
    ensure(flip - 1e-4 <= crossover && crossover <= flip + 1e-12, || format!("[{}, {flip}] misses {crossover}", flip - 1e-4))?;
    Ok(format!("flip at {flip:.4}, crossover {crossover:.6}"))
}

fn names(v: impl IntoIterator<Item = impl Into<String>>) -> BTreeSet<String> {
    v.into_iter().map(Into::into).collect()
}

fn reference_fixtures() -> Outcome {
    let kb = load("abdominal.kb");
    let obs = ObservationSet::at("t1", &[("N", "yes"), ("P", "yes")]);
    let (d, _) = instantiate(&kb, &obs, "t1").map_err(|e| e.to_string())?;
    let alts = |d: &InfluenceDiagram| names(d.current_decision().map(|x| x.alternatives.clone()).unwrap_or_default());
    ensure(names(d.hypothesis_names()) == names(["US", "FP"]), || format!("(a) hypotheses {:?}", d.hypothesis_names()))?;
    ensure(alts(&d) == names(["emetic", "Diovol"]), || format!("(a) treatments {:?}", alts(&d)))?;

    let ext = extend_topology(&d, &kb, &names(["A", "GC"]), "t1").map_err(|e| e.to_string())?;
    ensure(names(ext.hypothesis_names()) == names(["US", "FP", "A", "GC"]), || format!("(b) hypotheses {:?}", ext.hypothesis_names()))?;
    ensure(alts(&ext) == names(["emetic", "Diovol", "appendectomy", "treat-cyst"]), || format!("(b) treatments {:?}", alts(&ext)))?;

    let car = load("car.kb");
    let choose = |w: &str| -> Result<String, String> {
        let (d, _) = instantiate(&car, &ObservationSet::at("t1", &[("W", w), ("ST", "no")]), "t1").map_err(|e| e.to_string())?;
        Ok(best_decision(&d, &partition_for(&d, DEFAULT_QUANTUM)).map_err(|e| e.to_string())?.best_treatment)
    };
    let (wet, dry) = (choose("wet")?, choose("dry")?);
    ensure(wet == "REPLACE-DC" && dry == "REPLACE-ALT", || format!("(c) wet {wet}, dry {dry}"))?;
    Ok("(a) (b) (c) hold".into())
}

fn replay_determinism() -> Outcome {
    let dir = support::scratch("acceptance");
    let runtime = tokio::runtime::Builder::new_current_thread().build().map_err(|e| e.to_string())?;
    let fixtures = ["abdominal.kb", "car.kb", "lab.kb"];
    for seed in 0..SCRIPTS {
        let name = fixtures[seed as usize % fixtures.len()];
        let kb = Arc::new(load(name));
        let cmds = random_script(&mut rng(seed), &kb, 10);
        let script = replay(kb.clone(), &cmds).map_err(|(i, e)| format!("seed {seed}: command {i}: {e}"))?.script();
        let path = dir.join(format!("script{seed}.txt"));
        std::fs::write(&path, &script).map_err(|e| e.to_string())?;

        let kb_path = support::fixture(name);
        let first = support::cli(&["replay", &kb_path, path.to_str().unwrap()]);
        let second = support::cli(&["replay", &kb_path, path.to_str().unwrap()]);
        ensure(first.code == 0, || format!("seed {seed}: {}", first.stderr))?;
        ensure(first.stdout == second.stdout, || format!("seed {seed}: replays differ"))?;

        let app = router(AppState::new(kb));
        let parsed = parse_script(&script).map_err(|e| e.to_string())?;
        let over_http = runtime.block_on(async {
            let id = support::drive(&app, &parsed).await;
            support::send(&app, "GET", &format!("/sessions/{id}/snapshot"), None).await.1
        });
        ensure(over_http == first.stdout, || format!("seed {seed}: HTTP snapshot differs from CLI"))?;
    }
    let _ = std::fs::remove_dir_all(dir);
    Ok(format!("{SCRIPTS} scripts"))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 8] = [
        ("inference matches full-joint enumeration", oracle_equivalence),
        ("diagnosis and literal utility routes agree", utility_routes_agree),
        ("proportional refinements sound, perturbed rejected", refinement_soundness),
        ("refine then inverse coarsen restores tables", refine_coarsen_round_trip),
        ("coarsening rejects lossy merges, keeps lossless", coarsening_rule),
        ("sensitivity flip brackets the threshold crossover", threshold_crossover),
        ("reference fixtures", reference_fixtures),
        ("replay determinism over CLI and HTTP", replay_determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                println!("FAIL  {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
