//! Soft mixture-of-experts cross-sensor masked autoencoder with
//! descriptor-driven training-set sampling and evaluation tooling.
//!
//! Module map:
//! - [`numerics`]: tensors, reverse-mode differentiation, gradient checks
//! - [`tokenizer`]: patch tokens, masks, positional tables, tile splitting
//! - [`softmoe`]: soft routing, expert application, transformer-MoE blocks
//! - [`model`]: the two-modality encoder/decoder stack and checkpoints
//! - [`losses`]: reconstruction, contrastive, and routing regularizer terms
//! - [`sampler`]: raster descriptors, stratification, GA subset selection
//! - [`evalx`]: retrieval, probe metrics, parameter and FLOP accounting
//! - [`train`]: AdamW pretraining loop over paired images

pub mod error;
pub mod evalx;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod softmoe;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
