//! Desk-scale study of policy distillation as a state-representation
//! bottleneck.
//!
//! The library builds a confounded inverted-pendulum benchmark (one shared
//! dynamics, many "levels" that expand the 3-dimensional state into 30
//! observation variables with level-specific redundancy, shared noisy
//! combinations, copies, and pure noise), trains distributional C51 experts
//! per level, distills them into a single student network, and measures
//! three properties of the learned state representation:
//!
//! - variable selection, via gradient feature-importance profiles;
//! - state separability, via PLS/t-SNE embeddings and linear-SVM accuracy;
//! - robustness, via fixed-grid returns on freshly drawn levels.
//!
//! Everything is deterministic given a master seed: all randomness flows
//! through purpose-tagged streams in [`rng`].

pub mod agent;
pub mod analysis;
pub mod checkpoint;
pub mod distill;
pub mod env;
pub mod error;
pub mod math;
pub mod rng;

pub use error::{Error, Result};
