//! Regulation-aware optical/thermal traffic VQA at desk scale.
//!
//! The crate builds a small multi-spectral question-answering network around
//! three mechanisms: an offline prototype memory distilled from training
//! scenes, retrieval-guided knowledge injection into visual features, and
//! bidirectional cross-modal compensation, combined through zero-initialized
//! gated residuals. A synthetic paired optical/thermal traffic benchmark,
//! training loop, metrics and an ablation harness round out the toolkit.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod memory;
pub mod model;
pub mod pgke;
pub mod qasc;
pub mod tensor;

pub use error::{Error, Result};
