//! Model zoo and training recipe for the SDF classification pipeline.
//!
//! Three variants share one classification head: a vision pathway backed by a
//! small hierarchical global-context transformer, a morphology-only pathway
//! fed by the 7-entry feature vector, and an ensemble that concatenates both.
//! Training follows a warmup + layer-wise learning-rate decay schedule with
//! early stopping on validation loss.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod gcvit;
pub mod head;
pub mod model;
pub mod params;
pub mod schedule;
pub mod trainer;

pub use error::{ModelError, Result};
pub use model::{build_model, ModelConfig, SdfModel, Variant};
pub use trainer::{fit, overfit_sanity, TrainConfig};
