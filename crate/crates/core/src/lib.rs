//! Poisoning attacks on item-based collaborative filtering and detectors
//! for the injected sessions.

pub mod attacks;
pub mod datasets;
pub mod detectors;
pub mod embeddings;
pub mod error;
pub mod experiments;
pub mod neuralnet;
pub mod recommender;
pub mod rng;

pub use error::{Error, Result};
