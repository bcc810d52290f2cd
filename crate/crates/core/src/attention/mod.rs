//! Relational attention masks, masked multi-head attention and the
//! transformer block built from them.

mod block;
mod masks;
mod mha;

pub use block::{
    block_backward, block_forward, rms_norm, rms_norm_backward, transformer_block, AttentionSublayer, BlockCache,
    BlockParams, MlpParams, NormPlacement, RMS_EPS,
};
pub use masks::{build_masks, permute_mask, permute_masks, AttentionKind, Mask, MaskSet};
pub use mha::{attention_backward, attention_forward, masked_attention, AttentionCache, AttentionParams};

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
}
