//! Dimensional-rationale graph contrastive learning: graph data, augmentation,
//! a GIN encoder, contrastive and redundancy-reduction objectives, a bi-level
//! trainer for the per-dimension rationale weight, and evaluation.

pub mod analysis;
pub mod augment;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod trainer;

pub use error::{ConfigError, DataError, Error, Result};
