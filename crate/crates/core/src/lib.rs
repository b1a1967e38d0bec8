//! Machining operation sequence prediction from evolving part geometry.
//!
//! The pipeline runs from parametric part synthesis ([`geometry`]) through
//! face-adjacency graph extraction ([`graph`]) to a graph-attention encoder
//! and causal transformer decoder ([`model`]) trained with a small
//! reverse-mode autodiff engine ([`tensor`]) by the loop in [`train`].

pub mod error;
pub mod exec;
pub mod geometry;
pub mod model;
pub mod graph;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
