//! Core engine for structure-aware freelancer/project matching.
//!
//! The crate provides the numeric foundation (a small reverse-mode autodiff
//! tape over f32 tensors with f64 accumulation), the document pipeline
//! (corpus loading, tokenization, synthetic data), the two-tower encoder with
//! its frozen per-token backbone, interaction-derived signed adjacency
//! construction, the contrastive training objectives, a trainer, retrieval
//! evaluation, and an exact + approximate vector index.

pub mod adjacency;
pub mod backbone;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod index;
pub mod losses;
pub mod numerics;
pub mod trainer;

pub use numerics::{Tape, Tensor, VarId};
