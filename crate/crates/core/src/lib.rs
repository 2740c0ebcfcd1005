//! Per-signal physiological embeddings with transfer across cohorts.
//!
//! The crate covers the full pipeline: synthetic cohort generation
//! ([`synthgen`]), labeling and preprocessing ([`dataprep`]), a small neural
//! stack with LSTM layers ([`neuralnet`]), per-signal embedders
//! ([`embedder`]), gradient-boosted trees ([`gbm`]), interventional tree SHAP
//! ([`explain`]), evaluation ([`eval`]) and experiment orchestration
//! ([`pipeline`]).

pub mod dataprep;
pub mod error;
pub mod embedder;
pub mod eval;
pub mod explain;
pub mod gbm;
pub mod neuralnet;
pub mod pipeline;
pub mod rng;
pub mod synthgen;

pub use error::{PhaseError, Result};
