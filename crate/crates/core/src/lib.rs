//! Probabilistic splat reconstruction on a hashed probability pyramid.
//!
//! The scene is a learnable probability density over positions, stored as a
//! multiscale product of block-normalized piecewise-constant factors with
//! hash-shared fine levels ([`pyramid`]). Gaussians are drawn from it by
//! hierarchical inverse-CDF sampling ([`sampler`]), given attributes from a
//! hashed per-bin table ([`attributes`]), mapped to world space through an
//! L-infinity contraction ([`contract`]), and splatted by a CPU renderer with
//! exact manual adjoints ([`render`]). The density parameters are optimized
//! with score-function estimators, including a leave-one-out control variate
//! ([`estimators`]), inside the training loop in [`trainer`].

pub mod attributes;
pub mod camera;
pub mod contract;
pub mod error;
pub mod estimators;
pub mod io;
pub mod loss;
pub mod pyramid;
pub mod render;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
