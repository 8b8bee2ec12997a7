//! Bit-token semantic map completion.
//!
//! A two-stage pipeline over one-hot indoor semantic maps:
//!
//! 1. A binarizing autoencoder ([`quantizers::BitVae`]) encodes each map
//!    patch into `b` sign bits, giving a lookup-free integer token in
//!    `[0, 2^b)`; a codebook VQ autoencoder ([`quantizers::VqVae`]) is kept
//!    as the comparison baseline.
//! 2. A bidirectional masked transformer ([`maskformer::Maskformer`])
//!    predicts the tokens of unobserved patches, optionally conditioned on
//!    a target object category, and the decoder turns the completed token
//!    grid back into a full map.
//!
//! Supporting modules: [`map`] (grids, masking, serialization, rendering),
//! [`scenegen`] (procedural indoor scenes), [`nn`] (tensor/autodiff/Adam
//! substrate), and [`eval`] (metrics, protocols, ablations).

pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod map;
pub mod maskformer;
pub mod nn;
pub mod quantizers;
pub mod rng;
pub mod scenegen;

pub use error::{Error, Result};
