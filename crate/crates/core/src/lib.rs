//! Expression-conditioned latent video diffusion with masked cross-attention
//! for multi-character portrait animation, at desk scale.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod curation;
pub mod dataset;
pub mod error;
pub mod expression;
pub mod flow;
pub mod generator;
pub mod metrics;
pub mod numerics;
pub mod params;
pub mod reenact;
pub mod scene;
pub mod seed;

pub use error::{Error, Result};
