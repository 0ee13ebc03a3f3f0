//! Event-driven sparse recurrent language modeling.
//!
//! A gated recurrent cell only communicates the units whose cell state
//! crossed a learned threshold, so most of the state vector is exactly zero
//! at every step. Combining that activity sparsity with magnitude-pruned
//! weights multiplies the savings: a column of the weight matrix is charged
//! only when its unit fired, and only for its surviving entries. This crate
//! trains such models on word-level corpora, prunes them iteratively, runs
//! them through an event-driven engine that counts real multiply-accumulates,
//! and ships the analysis tooling to inspect what the training produced.

pub mod analyze;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod egru;
pub mod lm;
pub mod lstm;
pub mod math;
pub mod prune;
pub mod rng;
pub mod sparse_infer;
pub mod synth;
pub mod train;

pub use egru::{EgruParams, EgruState, StepMode, SurrogateCfg};
pub use math::{csc_matvec_active, dense_matvec, CscMatrix, DenseMatrix, DenseVector, Real};
pub use rng::Rng;
