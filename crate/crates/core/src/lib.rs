//! Text-conditioned joint-embedding predictive pretraining.
//!
//! Image patches are encoded, fused with caption tokens through
//! text-to-image cross-attention, and a predictor learns to regress the
//! fused representations of masked target blocks from a visible context
//! block. Targets come from an EMA twin of the online fusion module.

pub mod dataprep;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imageio;
pub mod masking;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
