//! Streaming test-time adaptation with multimodal class prototypes.
//!
//! Each class is a point set of text description embeddings plus a cache of
//! visual particles. Every test image is scored by entropic optimal
//! transport from its augmented views to each class, and confident
//! predictions pull the predicted class's particles toward the views that
//! carried the most transported mass.

pub mod bench;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod io;
pub mod primitives;
pub mod prototypes;
pub mod sinkhorn;
pub mod synth;
pub mod weighting;

pub use error::{Error, Result};
