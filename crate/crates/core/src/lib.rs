//! Stereotype-aware fairness auditing and mitigation for sequence recommenders.
//!
//! The crate is organized around a small pipeline:
//!
//! * [`dataset`] loads or generates timestamped user-item interactions and
//!   cuts them into fixed-length sequences with a leave-one-out split.
//! * [`stereotype`] measures how strongly each item is tied to a user group
//!   and summarizes user histories as per-group proportions.
//! * [`fairness`] computes the stereotype-aware fairness score (SF) of a
//!   recommendation set, plus a differentiable surrogate used as a loss.
//! * [`backbone`] is a frozen token-sequence scorer standing in for a
//!   pre-trained recommender, with exact input gradients.
//! * [`mixture`] routes stereotype prompt variants through a top-K gated
//!   set of soft-prompt experts and composes the final soft prompt.
//! * [`training`] implements the composite loss, manual backpropagation
//!   into the mixture parameters, and the optimizer loop.
//! * [`evaluation`] reports AUC / precision / recall and SF under implicit,
//!   explicit, and counterfactual prompt settings.
//! * [`cli`] wires everything into the `stereofair` binary.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod fairness;
pub mod math;
pub mod mixture;
pub mod pipeline;
pub mod stereotype;
pub mod training;
