//! Weakly-supervised temporal article grounding.
//!
//! Given a video and a multi-sentence article with a two-level sentence
//! hierarchy, the model scores every (sentence, segment proposal) pair over a
//! 2D temporal map. Training needs only video-article pairing: a two-level
//! multiple-instance ranking loss, a sparsity filter on single-sentence score
//! maps, and a cross-sentence loss asking high-level sentences to dominate
//! their low-level details. Inference applies NMS and an order-aware
//! rescoring pass; evaluation reports Recall@K, RC@K and order agreement.

pub mod error;
pub mod temporal_map;
mod linalg;
pub mod model;
pub mod objectives;
pub mod data;
pub mod formats;
pub mod config;
pub mod checkpoint;
pub mod synthetic;
pub mod training;
pub mod inference;
pub mod evaluation;

pub use error::{Error, Result};
