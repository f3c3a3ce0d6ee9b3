//! Diagnostic reasoning over time-indexed influence diagrams.
//!
//! A [`kb::KnowledgeBase`] holds causal structure, probability tables per time
//! index, utilities and trigger rules. From it, [`construct::instantiate`]
//! builds a task-specific [`diagram::InfluenceDiagram`] for a set of
//! observations. [`inference`] picks the treatment of maximal expected
//! utility, [`equivalence`] groups diagnoses that call for the same
//! treatments, [`sensitivity`] checks whether parameters from other times
//! would change the decision, and [`update`] revises values or topology when
//! they would. [`session`] strings all of this into a sequential loop.

pub mod construct;
pub mod cpt;
pub mod diagram;
pub mod equivalence;
pub mod inference;
pub mod kb;
pub mod report;
pub mod sensitivity;
pub mod session;
pub mod update;

/// Absolute tolerance used for probability normalization checks.
pub const PROB_TOLERANCE: f64 = 1e-9;
