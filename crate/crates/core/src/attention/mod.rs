//! Exact and FAVOR+ attention, sinusoidal positional encoding, and the
//! transformer block built from them.

mod block;
mod exact;
mod favor;
mod mha;
mod positional;

pub use block::{BlockCache, BlockSpec, NormPlacement, TransformerBlock};
pub use exact::attention_exact;
pub use favor::{
    attention_favor, default_feature_count, favor_feature_map, orthogonal_gaussian, FavorFeatures,
    RedrawPolicy,
};
pub use mha::{mha, Kernel, MhaCache, MhaWeights, MultiHeadAttention};
pub use positional::positional_encoding;
