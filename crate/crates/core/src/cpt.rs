//! Conditional probability tables and mixed-radix indexing over parent
//! configurations.

use serde::{Deserialize, Serialize};

/// A conditional probability table.
///
/// `rows` has one entry per joint configuration of `parents`, ordered
/// mixed-radix with the first parent most significant. Each row holds one
/// probability per state of the child.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cpt {
    pub parents: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Cpt {
    pub fn new(parents: Vec<String>, rows: Vec<Vec<f64>>) -> Self {
        Self { parents, rows }
    }

    /// A root table with a single row.
    pub fn prior(row: Vec<f64>) -> Self {
        Self { parents: Vec::new(), rows: vec![row] }
    }

    pub fn is_root(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent_position(&self, parent: &str) -> Option<usize> {
        self.parents.iter().position(|p| p == parent)
    }

    /// Row for the given parent state indices.
    pub fn row(&self, parent_states: &[usize], parent_cards: &[usize]) -> &[f64] {
        &self.rows[config_index(parent_states, parent_cards)]
    }

    /// Rows whose sum differs from 1 by more than `tol`, with their sums.
    pub fn unnormalized_rows(&self, tol: f64) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                let s: f64 = r.iter().sum();
                ((s - 1.0).abs() > tol || r.iter().any(|p| !p.is_finite() || *p < 0.0)).then_some((i, s))
            })
            .collect()
    }
}

/// Mixed-radix index of `states` under `cards`, first position most significant.
pub fn config_index(states: &[usize], cards: &[usize]) -> usize {
    debug_assert_eq!(states.len(), cards.len());
    states.iter().zip(cards).fold(0, |acc, (&s, &c)| acc * c + s)
}

/// Inverse of [`config_index`].
pub fn config_states(mut index: usize, cards: &[usize]) -> Vec<usize> {
    let mut out = vec![0; cards.len()];
    for (slot, &c) in out.iter_mut().zip(cards).rev() {
        *slot = index % c;
        index /= c;
    }
    out
}

pub fn config_count(cards: &[usize]) -> usize {
    cards.iter().product()
}

/// Iterates all configurations of `cards` in mixed-radix order.
pub fn configurations(cards: &[usize]) -> impl Iterator<Item = Vec<usize>> + '_ {
    (0..config_count(cards)).map(move |i| config_states(i, cards))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let cards = [2, 3, 2];
        for i in 0..12 {
            assert_eq!(config_index(&config_states(i, &cards), &cards), i);
        }
        assert_eq!(config_states(5, &cards), vec![0, 2, 1]);
    }

    #[test]
    fn empty_parent_set_has_one_configuration() {
        assert_eq!(configurations(&[]).collect::<Vec<_>>(), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn flags_bad_rows() {
        let cpt = Cpt::new(vec!["a".into()], vec![vec![0.5, 0.5], vec![0.6, 0.3]]);
        let bad = cpt.unnormalized_rows(1e-9);
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].0, 1);
    }
}
