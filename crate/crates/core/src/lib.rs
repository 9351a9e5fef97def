//! Pyramid transformer network for paired image-to-image synthesis.
//!
//! The network tokenizes images with overlapping windows, mixes tokens with
//! FAVOR+ linear attention in the encoder/decoder and exact softmax attention
//! in the bottleneck, and fuses a full-resolution and a half-resolution branch
//! before a per-pixel projection.

pub mod data;
pub mod error;
pub mod eval;
pub mod params;
pub mod patching;
pub mod attention;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{param_count, ParamId, ParameterStore};
pub use tensor::{Rng, Scalar, Tensor};
