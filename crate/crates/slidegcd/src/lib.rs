//! SlideGCD: rehearsal-buffered slide-graph collaborative training.
//!
//! A slide-level kNN hypergraph is maintained over a class-aware buffer of
//! past slide embeddings; a two-layer hypergraph-convolution head with
//! centering attention classifies batch nodes, coupled to the MIL branch by
//! JS/KL distillation or one of the fusion strategies.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod rehearsal;
pub mod slidegraph;
pub mod sparse;
pub mod tape;

pub use error::{Error, Result};
pub use matrix::Matrix;
