//! Object-focused multimodal style transfer.
//!
//! Two steps: invert a generator latent under a masked directional embedding
//! loss to obtain style representations, then transfer them onto the salient
//! object with salient-to-key attention and blend the surroundings back in.

pub mod assets;
pub mod clip_direction;
pub mod error;
pub mod fsutil;
pub mod harmonize;
pub mod image;
pub mod ingest;
pub mod inversion;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod s2k_transfer;
pub mod sampler;
pub mod seed;
pub mod weights;

pub use error::{Error, Result};
