//! Flatness-guided mixup for domain generalization on synthetic benchmarks.
//!
//! The crate bundles a small reverse-mode autodiff engine, synthetic
//! multi-domain datasets, the four networks (extractor, classifier,
//! similarity policy, discriminator), the mixup weight policy and its
//! objectives, a trainer with an ablation ladder and weight averaging, and
//! the flatness and loss-surface probes.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod mixup;
pub mod models;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
