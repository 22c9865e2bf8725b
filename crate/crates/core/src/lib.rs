//! Olfactory EEG classification with frequency-band attention.
//!
//! The pipeline runs Welch PSD estimation ([`signal`]), multi-scale sliding
//! window band generation ([`bandgen`]), a global + local frequency band
//! attention block with pooled head fusion ([`attention`]) and a small
//! multi-branch CNN ([`model`]) built on the dense kernels in [`nn`].
//! [`data`] and [`training`] provide the dataset container, synthetic trial
//! generator, fold planning and the cross-validation harness.

pub mod attention;
pub mod bandgen;
pub mod data;
mod error;
pub mod model;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod training;

pub use error::{Error, ErrorCategory, FormatError, Result};
pub use nn::Grid;
