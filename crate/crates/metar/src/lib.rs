//! Meta relational learning for few-shot link prediction in knowledge graphs.
//!
//! A few-shot link prediction task asks: given only K observed triples of a
//! relation (the support set), predict the tail entities of further triples of
//! that same relation (the query set). This crate implements the MetaR
//! approach end to end:
//!
//! * a relation meta learner — a small fully connected network mapping each
//!   support (head, tail) embedding pair to a relation vector, averaged over
//!   the support set;
//! * a translational score `‖h + R − t‖₂` with margin ranking losses on
//!   support and query sets;
//! * a gradient meta step: the closed-form gradient of the support loss with
//!   respect to the relation meta, used for one rapid update before the query
//!   set is scored;
//! * a hand-derived backward pass for the whole task, including the exact
//!   second-order term through the rapid update, verified against finite
//!   differences;
//! * episodic training with Adam, early stopping on dev Hits@10, and binary
//!   checkpoints;
//! * ranking evaluation (filtered MRR / Hits@N), benchmark loaders for the
//!   published few-shot dataset layout, a synthetic planted-relation
//!   generator, and a plain TransE trainer for embedding pretraining and the
//!   `-g -r` ablation baseline.
//!
//! All numeric code is generic over the scalar type ([`Scalar`], implemented
//! for `f32` and `f64`); the type aliases at the crate root pin the common
//! double-precision instantiations.

pub mod data;
pub mod episode;
pub mod error;
pub mod eval;
pub mod grad;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision model parameters, the default for training and tests.
pub type ModelParams64 = model::ModelParams<f64>;
/// Single-precision model parameters, for memory-constrained runs.
pub type ModelParams32 = model::ModelParams<f32>;
/// Double-precision embedding table.
pub type EmbeddingTable64 = model::EmbeddingTable<f64>;
/// Double-precision translational pretraining model.
pub type TransEModel64 = train::TransEModel<f64>;
/// Double-precision training checkpoint.
pub type Checkpoint64 = train::Checkpoint<f64>;
