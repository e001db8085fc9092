//! Time2Vec-augmented CNN-Transformer for two-channel sEMG gesture recognition.
//!
//! The crate covers the whole pipeline: trial storage and synthetic corpora,
//! windowing and leave-one-subject-out fold planning, augmentation, the
//! hybrid model with hand-written gradients, two-stage training with early
//! stopping, and evaluation utilities.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod training;
pub mod windowing;

pub use error::{Error, Result};
