//! Group-aware embedding training on a hand-rolled dense-tensor engine.
//!
//! The crate trains an identity-embedding model that augments a plain
//! instance representation with a mixture of group-aware representations.
//! Group membership is never supervised: a small decision network predicts
//! it, and its own predictions (renormalized against their running
//! expectation so no group starves) are fed back as training labels.
//!
//! Layout:
//! - [`numerics`]: tensors, the recorded op graph, reverse-mode gradients,
//!   finite-difference checking
//! - [`model`]: the embedding model, group ensembles, checkpoints
//! - [`grouping`]: running label statistics and group-label assignment
//! - [`objectives`]: margin softmax, self-grouping loss, combination
//! - [`metrics`]: verification/identification metrics and reports
//! - [`pipeline`]: synthetic data, training loop, evaluation, ablations

pub mod error;
pub mod grouping;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod pipeline;

pub use error::{Error, Result};
