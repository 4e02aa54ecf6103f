//! Robustness evaluation toolkit for zero-shot dual-encoder classifiers.
//!
//! The crate bundles desk-scale reference models with exact input gradients,
//! white-box / transfer / black-box attacks, synthetic distribution shifts,
//! typographic-attack dataset generation, robustness metrics, train/test
//! overlap detection and gradient-guided prompt search.

pub mod attacks;
pub mod dedup;
pub mod error;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod promptsearch;
pub mod rng;
pub mod shiftgen;
pub mod tape;

pub use error::{Error, Result};
pub use image::{Dataset, Image, InputShape, LabeledExample};
