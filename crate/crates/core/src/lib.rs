//! Distributed speech compression for multi-microphone recordings: per-source
//! autoencoders, bandwidth-adaptive PCA over their latents, and a score-based
//! enhancer that consumes the reconstruction.

pub mod channel;
pub mod codec;
pub mod data;
pub mod dsp;
pub mod enhance;
pub mod error;
pub mod harness;
pub mod losses;
pub mod ndpca;
pub mod percept;
pub mod pipelines;

pub use error::{Error, Result};
