//! Transformer building blocks.

pub(crate) mod attention;
pub mod layers;
pub mod mask;
pub mod patch;

pub use layers::{
    timestep_embedding, transformer_forward, AdaLnBlock, AdaLnFinal, Init, LayerNorm, Linear, Mlp, ParamBuilder,
    SelfAttention, TransformerBlock,
};
pub use mask::{build_mask_1step, build_mask_mrar, AttentionMask, BlockLayout, SegmentKind};
pub use patch::{patch_merge, patch_split};
