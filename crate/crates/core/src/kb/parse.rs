use std::collections::{BTreeMap, BTreeSet};

use super::{
    validate_kb, CoarsenTemplate, KbError, KnowledgeBase, LiteralUtility, OverrideUtility, RefineTemplate, Role,
    TimeAxis, Treatment, TreatmentKind, TriggerEffect, TriggerRule, TriggerStep, UtilityTable, Variable,
};
use crate::cpt::{config_count, config_index, Cpt};

const RESERVED: &str = "=,:;()|#@<>";

fn is_ident_char(c: char) -> bool {
    !c.is_whitespace() && !RESERVED.contains(c)
}

struct Cursor {
    line: usize,
    chars: Vec<char>,
    pos: usize,
}

impl Cursor {
    fn new(line: usize, src: &str) -> Self {
        Self { line, chars: src.chars().collect(), pos: 0 }
    }

    fn err(&self, message: impl Into<String>) -> KbError {
        KbError::Syntax { line: self.line, column: self.pos + 1, message: message.into() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.chars.len()
    }

    fn peek_str(&mut self, s: &str) -> bool {
        self.skip_ws();
        let want: Vec<char> = s.chars().collect();
        self.chars.len() >= self.pos + want.len() && self.chars[self.pos..self.pos + want.len()] == want[..]
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.peek_str(s) {
            self.pos += s.chars().count();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<(), KbError> {
        if self.eat(s) {
            Ok(())
        } else {
            Err(self.err(format!("expected '{s}'")))
        }
    }

    fn ident(&mut self) -> Result<String, KbError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && is_ident_char(self.chars[self.pos]) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected identifier"));
        }
        Ok(self.chars[start..self.pos].iter().collect())
    }

    /// Keyword: an identifier with the given spelling.
    fn keyword(&mut self, kw: &str) -> bool {
        self.skip_ws();
        let save = self.pos;
        match self.ident() {
            Ok(w) if w == kw => true,
            _ => {
                self.pos = save;
                false
            }
        }
    }

    fn number(&mut self) -> Result<f64, KbError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && (self.chars[self.pos].is_ascii_alphanumeric() || "+-.".contains(self.chars[self.pos])) {
            self.pos += 1;
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => {
                self.pos = start;
                Err(self.err(format!("expected a finite number, found '{text}'")))
            }
        }
    }

    fn integer(&mut self) -> Result<usize, KbError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        text.parse().map_err(|_| {
            self.pos = start;
            self.err("expected a non-negative integer")
        })
    }

    /// `key=value` where the key must match.
    fn keyed(&mut self, key: &str) -> Result<String, KbError> {
        self.expect(key)?;
        self.expect("=")?;
        self.ident()
    }

    /// `a=b` literal.
    fn literal(&mut self) -> Result<(String, String), KbError> {
        let v = self.ident()?;
        self.expect("=")?;
        let s = self.ident()?;
        Ok((v, s))
    }

    fn ident_list(&mut self) -> Result<Vec<String>, KbError> {
        let mut out = vec![self.ident()?];
        while self.eat(",") {
            out.push(self.ident()?);
        }
        Ok(out)
    }

    fn number_list(&mut self) -> Result<Vec<f64>, KbError> {
        let mut out = vec![self.number()?];
        while self.eat(",") {
            out.push(self.number()?);
        }
        Ok(out)
    }

    fn literal_list(&mut self) -> Result<Vec<(String, String)>, KbError> {
        let mut out = Vec::new();
        if self.peek_str(":") {
            return Ok(out);
        }
        out.push(self.literal()?);
        while self.eat(",") {
            out.push(self.literal()?);
        }
        Ok(out)
    }

    fn finish(&mut self) -> Result<(), KbError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.err("unexpected trailing input"))
        }
    }
}

/// `VAR=state` conditions of one table row.
type Condition = Vec<(String, String)>;

struct RawCpt {
    line: usize,
    var: String,
    time: String,
    variant: Option<String>,
    rows: Vec<(usize, Condition, Vec<f64>)>,
}

enum Stmt {
    Var(Variable),
    Arc(String, String),
    Time(Vec<String>),
    Cpt(RawCpt),
    Treat(Treatment),
    Util { treatment: String, full: bool, literals: Vec<(String, String)>, value: f64 },
    Trigger(TriggerRule),
    Refine(RefineTemplate),
    Coarsen(CoarsenTemplate),
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_statement(cur: &mut Cursor) -> Result<Stmt, KbError> {
    let kw = cur.ident()?;
    let stmt = match kw.as_str() {
        "var" => {
            let name = cur.ident()?;
            let role = match cur.keyed("role")?.as_str() {
                "hypothesis" => Role::Hypothesis,
                "observable" => Role::Observable,
                "intermediate" => Role::Intermediate,
                other => return Err(cur.err(format!("unknown role '{other}'"))),
            };
            cur.expect("states")?;
            cur.expect("=")?;
            let states = cur.ident_list()?;
            let normal = if cur.at_end() { None } else { Some(cur.keyed("normal")?) };
            Stmt::Var(Variable { name, states, role, normal })
        }
        "arc" => {
            let a = cur.ident()?;
            cur.expect("->")?;
            let b = cur.ident()?;
            Stmt::Arc(a, b)
        }
        "time" => {
            let mut labels = vec![cur.ident()?];
            while !cur.at_end() {
                labels.push(cur.ident()?);
            }
            Stmt::Time(labels)
        }
        "cpt" => {
            let var = cur.ident()?;
            cur.expect("@")?;
            let time = cur.ident()?;
            let variant = if cur.at_end() { None } else { Some(cur.keyed("variant")?) };
            Stmt::Cpt(RawCpt { line: cur.line, var, time, variant, rows: Vec::new() })
        }
        "treat" => {
            let name = cur.ident()?;
            let kind = if cur.at_end() {
                TreatmentKind::Treatment
            } else {
                match cur.keyed("kind")?.as_str() {
                    "test" => TreatmentKind::Test,
                    "treatment" => TreatmentKind::Treatment,
                    other => return Err(cur.err(format!("unknown treatment kind '{other}'"))),
                }
            };
            Stmt::Treat(Treatment { name, kind })
        }
        "util" => {
            let treatment = cur.ident()?;
            let full = cur.keyword("full");
            let literals = if full { cur.literal_list()? } else { vec![cur.literal()?] };
            cur.expect(":")?;
            let value = cur.number()?;
            Stmt::Util { treatment, full, literals, value }
        }
        "trigger" => {
            let name = cur.ident()?;
            cur.expect(":")?;
            let (var, state) = cur.literal()?;
            let mut pattern = vec![TriggerStep { var, state, within: None }];
            while cur.keyword("then") {
                let (var, state) = cur.literal()?;
                if !cur.keyword("within") {
                    return Err(cur.err("expected 'within'"));
                }
                let k = cur.integer()?;
                pattern.push(TriggerStep { var, state, within: Some(k) });
            }
            cur.expect("=>")?;
            let effect = if cur.keyword("variant") {
                cur.expect("(")?;
                let var = cur.ident()?;
                cur.expect(",")?;
                let tag = cur.ident()?;
                cur.expect(")")?;
                TriggerEffect::Variant { var, tag }
            } else if cur.keyword("include") {
                cur.expect("(")?;
                let var = cur.ident()?;
                cur.expect(")")?;
                TriggerEffect::Include { var }
            } else {
                return Err(cur.err("expected 'variant(...)' or 'include(...)'"));
            };
            Stmt::Trigger(TriggerRule { name, pattern, effect })
        }
        "refine" => {
            let name = cur.ident()?;
            let var = cur.ident()?;
            cur.expect(":")?;
            let mut splits = Vec::new();
            loop {
                let state = cur.ident()?;
                cur.expect("->")?;
                let mut parts = Vec::new();
                loop {
                    let v = cur.ident()?;
                    cur.expect(":")?;
                    let w = cur.number()?;
                    parts.push((v, w));
                    if !cur.eat(",") {
                        break;
                    }
                }
                splits.push((state, parts));
                if !cur.eat(";") {
                    break;
                }
            }
            Stmt::Refine(RefineTemplate { name, var, splits })
        }
        "coarsen" => {
            let name = cur.ident()?;
            let var = cur.ident()?;
            cur.expect(":")?;
            let mut merges = Vec::new();
            loop {
                let new = cur.ident()?;
                cur.expect("<-")?;
                merges.push((new, cur.ident_list()?));
                if !cur.eat(";") {
                    break;
                }
            }
            Stmt::Coarsen(CoarsenTemplate { name, var, merges })
        }
        other => {
            cur.pos = 0;
            return Err(cur.err(format!("unknown statement '{other}'")));
        }
    };
    cur.finish()?;
    Ok(stmt)
}

fn parse_row(cur: &mut Cursor) -> Result<(Condition, Vec<f64>), KbError> {
    cur.expect("|")?;
    let assignment = cur.literal_list()?;
    cur.expect(":")?;
    let probs = cur.number_list()?;
    cur.finish()?;
    Ok((assignment, probs))
}

/// Parses a knowledge base document and validates it.
pub fn parse_kb(text: &str) -> Result<KnowledgeBase, KbError> {
    let mut stmts: Vec<(usize, Stmt)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let body = strip_comment(raw);
        if body.trim().is_empty() {
            continue;
        }
        let mut cur = Cursor::new(line_no, body);
        if cur.peek_str("|") {
            let row = parse_row(&mut cur)?;
            match stmts.last_mut() {
                Some((_, Stmt::Cpt(raw))) => raw.rows.push((line_no, row.0, row.1)),
                _ => return Err(KbError::Syntax { line: line_no, column: 1, message: "table row outside a cpt block".into() }),
            }
            continue;
        }
        let stmt = parse_statement(&mut cur)?;
        stmts.push((line_no, stmt));
    }
    let kb = build(stmts)?;
    let violations = validate_kb(&kb);
    if violations.is_empty() {
        Ok(kb)
    } else {
        Err(KbError::Invalid(violations))
    }
}

fn undeclared(line: usize, what: &'static str, name: &str) -> KbError {
    KbError::Undeclared { line, what, name: name.to_string() }
}

fn duplicate(line: usize, what: &'static str, name: &str) -> KbError {
    KbError::Duplicate { line, what, name: name.to_string() }
}

fn build(stmts: Vec<(usize, Stmt)>) -> Result<KnowledgeBase, KbError> {
    let mut kb = KnowledgeBase::default();
    let mut time_seen = false;

    // Declarations first so references may appear in any order.
    for (line, stmt) in &stmts {
        match stmt {
            Stmt::Var(v) => {
                if kb.variable(&v.name).is_some() {
                    return Err(duplicate(*line, "variable", &v.name));
                }
                kb.variables.push(v.clone());
            }
            Stmt::Time(labels) => {
                if time_seen {
                    return Err(duplicate(*line, "time axis", "time"));
                }
                time_seen = true;
                kb.time_axis = TimeAxis { labels: labels.clone() };
            }
            Stmt::Treat(t) => {
                if kb.treatment(&t.name).is_some() {
                    return Err(duplicate(*line, "treatment", &t.name));
                }
                kb.treatments.push(t.clone());
            }
            _ => {}
        }
    }
    kb.utilities = UtilityTable { normals: kb.normals(), ..Default::default() };

    let check_literal = |kb: &KnowledgeBase, line: usize, var: &str, state: &str| -> Result<(), KbError> {
        let v = kb.variable(var).ok_or_else(|| undeclared(line, "variable", var))?;
        if v.state_index(state).is_none() {
            return Err(undeclared(line, "state", &format!("{var}={state}")));
        }
        Ok(())
    };

    for (line, stmt) in &stmts {
        match stmt {
            Stmt::Arc(a, b) => {
                for end in [a, b] {
                    if kb.variable(end).is_none() {
                        return Err(undeclared(*line, "variable", end));
                    }
                }
                if kb.arcs.iter().any(|(x, y)| x == a && y == b) {
                    return Err(duplicate(*line, "arc", &format!("{a} -> {b}")));
                }
                kb.arcs.push((a.clone(), b.clone()));
            }
            Stmt::Util { treatment, full, literals, value } => {
                if kb.treatment(treatment).is_none() {
                    return Err(undeclared(*line, "treatment", treatment));
                }
                for (v, s) in literals {
                    check_literal(&kb, *line, v, s)?;
                }
                if *full {
                    kb.utilities.override_entries.push(OverrideUtility {
                        treatment: treatment.clone(),
                        assignment: literals.clone(),
                        value: *value,
                    });
                } else {
                    let (var, state) = literals[0].clone();
                    kb.utilities.literal_entries.push(LiteralUtility { treatment: treatment.clone(), var, state, value: *value });
                }
            }
            Stmt::Trigger(rule) => {
                if kb.triggers.iter().any(|r| r.name == rule.name) {
                    return Err(duplicate(*line, "trigger", &rule.name));
                }
                for step in &rule.pattern {
                    check_literal(&kb, *line, &step.var, &step.state)?;
                }
                if kb.variable(rule.effect.var()).is_none() {
                    return Err(undeclared(*line, "variable", rule.effect.var()));
                }
                kb.triggers.push(rule.clone());
            }
            Stmt::Refine(r) => {
                if kb.refinement(&r.name).is_some() {
                    return Err(duplicate(*line, "refinement", &r.name));
                }
                if kb.variable(&r.var).is_none() {
                    return Err(undeclared(*line, "variable", &r.var));
                }
                kb.refinements.push(r.clone());
            }
            Stmt::Coarsen(c) => {
                if kb.coarsening(&c.name).is_some() {
                    return Err(duplicate(*line, "coarsening", &c.name));
                }
                if kb.variable(&c.var).is_none() {
                    return Err(undeclared(*line, "variable", &c.var));
                }
                kb.coarsenings.push(c.clone());
            }
            _ => {}
        }
    }

    for (_, stmt) in stmts {
        if let Stmt::Cpt(raw) = stmt {
            let var = kb.variable(&raw.var).ok_or_else(|| undeclared(raw.line, "variable", &raw.var))?.clone();
            if !kb.time_axis.contains(&raw.time) {
                return Err(undeclared(raw.line, "time index", &raw.time));
            }
            let cpt = assemble_cpt(&kb, &var, &raw)?;
            if kb.cpt_bank.insert(&raw.var, &raw.time, raw.variant.as_deref(), cpt).is_some() {
                let label = format!("{} @ {}{}", raw.var, raw.time, raw.variant.map(|v| format!(" variant={v}")).unwrap_or_default());
                return Err(duplicate(raw.line, "cpt", &label));
            }
        }
    }
    Ok(kb)
}

/// Places rows by their parent assignment. Missing configurations are left as
/// empty rows so validation can report them.
fn assemble_cpt(kb: &KnowledgeBase, var: &Variable, raw: &RawCpt) -> Result<Cpt, KbError> {
    let kb_parents = kb.parents(&var.name);
    let named: BTreeSet<String> = raw.rows.first().map(|(_, a, _)| a.iter().map(|(v, _)| v.clone()).collect()).unwrap_or_default();
    let mut parents: Vec<String> = kb_parents.iter().filter(|p| named.contains(*p)).cloned().collect();
    for (_, a, _) in raw.rows.iter().take(1) {
        for (v, _) in a {
            if !parents.contains(v) {
                parents.push(v.clone());
            }
        }
    }
    let mut cards = Vec::with_capacity(parents.len());
    for p in &parents {
        let pv = kb.variable(p).ok_or_else(|| undeclared(raw.line, "variable", p))?;
        cards.push(pv.states.len());
    }
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); config_count(&cards)];
    let mut filled = vec![false; rows.len()];
    for (line, assignment, probs) in &raw.rows {
        let map: BTreeMap<&str, &str> = assignment.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        if map.len() != assignment.len() || map.len() != parents.len() || !parents.iter().all(|p| map.contains_key(p.as_str())) {
            return Err(KbError::Syntax {
                line: *line,
                column: 1,
                message: format!("row must assign exactly the parents {{{}}}", parents.join(",")),
            });
        }
        let mut states = Vec::with_capacity(parents.len());
        for p in &parents {
            let s = map[p.as_str()];
            let idx = kb
                .variable(p)
                .and_then(|pv| pv.state_index(s))
                .ok_or_else(|| undeclared(*line, "state", &format!("{p}={s}")))?;
            states.push(idx);
        }
        let idx = config_index(&states, &cards);
        if filled[idx] {
            return Err(duplicate(*line, "row", &format!("{} row {}", var.name, idx)));
        }
        filled[idx] = true;
        rows[idx] = probs.clone();
    }
    Ok(Cpt::new(parents, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document() {
        let kb = parse_kb("var X role=observable states=a,b\ntime t1\ncpt X @ t1\n| : 0.5,0.5\n").unwrap();
        assert_eq!(kb.variables.len(), 1);
        assert!(kb.arcs.is_empty());
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_kb("var X role=observable states=a,b\narc X => Y\n").unwrap_err();
        assert_eq!(err, KbError::Syntax { line: 2, column: 7, message: "expected '->'".into() });
    }

    #[test]
    fn undeclared_reference() {
        let err = parse_kb("var X role=observable states=a,b\narc X -> Y\n").unwrap_err();
        assert!(matches!(err, KbError::Undeclared { line: 2, what: "variable", .. }), "{err:?}");
    }

    #[test]
    fn duplicate_declaration() {
        let err = parse_kb("var X role=observable states=a,b\nvar X role=observable states=a,b\n").unwrap_err();
        assert!(matches!(err, KbError::Duplicate { line: 2, .. }));
    }

    #[test]
    fn comments_and_full_utilities() {
        let text = "var H role=hypothesis states=ok,bad normal=ok # h\n\
                    time t1\n\
                    cpt H @ t1\n| : 0.9,0.1\n\
                    treat T kind=test\n\
                    util T full : -1\n\
                    util T H=bad : 2\n";
        let kb = parse_kb(text).unwrap();
        assert_eq!(kb.treatments[0].kind, TreatmentKind::Test);
        assert_eq!(kb.utilities.override_entries[0].assignment, vec![]);
        assert_eq!(kb.utilities.literal_entries[0].value, 2.0);
    }

    #[test]
    fn triggers_and_maps() {
        let text = "var A role=observable states=x,y\nvar B role=hypothesis states=x,y normal=x\ntime t1 t2\n\
                    cpt A @ t1\n| : 0.5,0.5\ncpt B @ t1\n| : 0.5,0.5\n\
                    trigger r: A=x then B=y within 1 then A=y within 0 => include(B)\n\
                    refine split A: y -> y1:0.3,y2:0.7\n\
                    coarsen merge A: xy <- x,y\n";
        let kb = parse_kb(text).unwrap();
        assert_eq!(kb.triggers[0].pattern.len(), 3);
        assert_eq!(kb.triggers[0].pattern[1].within, Some(1));
        assert_eq!(kb.refinements[0].splits[0].1, vec![("y1".to_string(), 0.3), ("y2".to_string(), 0.7)]);
        assert_eq!(kb.coarsenings[0].merges[0].1, vec!["x".to_string(), "y".to_string()]);
    }

    #[test]
    fn missing_row_is_a_violation() {
        let text = "var A role=observable states=x,y\nvar B role=observable states=x,y\narc A -> B\ntime t1\n\
                    cpt A @ t1\n| : 0.5,0.5\ncpt B @ t1\n| A=x : 0.5,0.5\n";
        match parse_kb(text).unwrap_err() {
            KbError::Invalid(v) => assert_eq!(v.len(), 1, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }
}
