//! Repetitive action counting over pluggable per-frame features.
//!
//! The pipeline samples a fixed number of frames from a video, builds
//! sliding-window clips at three temporal scales, encodes each clip with a
//! frozen feature provider followed by a trainable 3D convolution and a
//! spatial max-pool, turns the per-scale embeddings into attention
//! correlation matrices, and regresses a per-frame density map whose sum is
//! the repetition count.

pub mod checkpoint;
pub mod config;
pub mod correlation;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod predictor;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
