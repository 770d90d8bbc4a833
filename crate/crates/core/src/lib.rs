//! Core library for the sperm DNA fragmentation (SDF) classification pipeline.
//!
//! Covers everything that does not require a neural network runtime: manifest
//! loading and patient-grouped splitting, morphometric feature extraction from
//! phase-contrast crops, classification metrics with confidence intervals,
//! intra-expert concordance analysis, and a synthetic dataset generator used
//! for end-to-end testing.

pub mod concordance;
pub mod data;
pub mod error;
pub mod imagebuf;
pub mod metrics;
pub mod morphometry;
pub mod plots;
pub mod synth;

pub use error::{CoreError, Result};
