//! Latent masks and the masked-cross-attention denoiser.

mod denoiser;
mod mask;

pub(crate) use denoiser::GraphInput;
pub use denoiser::{
    masked_cross_attention_block, Condition, CrossAttentionParams, Denoiser, DenoiserConfig,
    DenoiserInput, TokenGrid,
};
pub use mask::{
    build_latent_mask, build_pair_mask, frame_pair_mask, FaceMaskTrack, LatentMaskSet, QueryLayout,
};

#[cfg(test)]
mod tests;
