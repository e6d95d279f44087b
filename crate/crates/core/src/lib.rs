//! Sparse invariant-feature masks for transformer text classifiers.
//!
//! A small transformer encoder is wrapped with per-layer [`masking::FilterLayer`]s
//! that learn which hidden dimensions to keep. The top mask doubles as the
//! query of a token-level attention head. Training proceeds greedily from the
//! top layer down (see [`trainer`]).

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod masking;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
