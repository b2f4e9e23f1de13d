//! Bayesian semantic segmentation with Monte Carlo dropout.
//!
//! The crate is organized around a small differentiable tensor core
//! ([`tensor`]), a fully convolutional DenseNet built on top of it
//! ([`densenet`]), a training loop with class-imbalance-aware losses
//! ([`training`]), MC-dropout uncertainty quantification ([`bayes_uq`]),
//! pixel-wise evaluation metrics ([`seg_metrics`]), an uncertainty-assisted
//! surrogate stage ([`surrogate`]), deterministic synthetic datasets
//! ([`synthdata`]), and the file formats tying them together ([`io`]).
//!
//! Everything is deterministic given explicit seeds: randomness flows through
//! the counter-based generator in [`rng`], so results do not depend on
//! execution order or thread count.

pub mod bayes_uq;
pub mod densenet;
mod error;
pub mod io;
pub mod rng;
pub mod seg_metrics;
pub mod surrogate;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Scalar type used by the production pipeline. Gradient-check tests
/// instantiate the generic code with `f64` instead.
pub type Real = f32;
