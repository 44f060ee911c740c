//! Identity-aware image similarity over precomputed embeddings.
//!
//! The crate is organised around the pipeline stages:
//!
//! - [`model`]: embedding bundles, manifests, triplets, pair labels and their file formats.
//! - [`ot`]: debiased entropic optimal transport between patch-token sets.
//! - [`losses`]: InfoNCE / hinge / BCE objectives with analytic gradients.
//! - [`trainer`]: the dual projection head, hand-written backprop and AdamW.
//! - [`curation`]: balanced allocation, hard-negative mining, triplet construction, vote aggregation.
//! - [`eval`]: similarity, retrieval / verification / triplet / correlation metrics and protocols.
//! - [`sensitivity`]: per-instance OLS over edit grids and bootstrap aggregation.
//! - [`runinfo`]: run configuration hashing embedded into every report.

pub mod curation;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod losses;
pub mod model;
pub mod ot;
pub mod runinfo;
pub mod sensitivity;
pub mod trainer;

mod linalg;
mod rng;

pub use error::{Error, Result};

/// Tool version embedded in reports and checkpoints.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
