//! Long-term disentangled pitch/rhythm representations of symbolic melodies.
//!
//! The crate covers the whole pipeline: tokenizing MIDI melodies
//! ([`corpus`]), the recurrent VAE encoders and decoders ([`model`]), the
//! contrastive and reconstruction losses ([`contrastive`]), multi-phase
//! training ([`training`]), evaluation probes ([`evaluation`]) and latent
//! space generation ([`generation`]). Numerics run on a small tape-based
//! autodiff engine ([`engine`]).

pub mod contrastive;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod model;
pub mod training;

pub use error::{Error, Result};
