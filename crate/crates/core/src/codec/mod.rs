//! Turbo-autoencoder structure: interleaver, interleaved rate-1/3 CNN
//! encoder with power normalization, and the iterative CNN decoder.
//!
//! Decoder iteration `i` runs `g_{i,1}` on `[z₁; z₂; p]` to get a posterior
//! `q`, then `g_{i,2}` on `[π(z₁); z₃; π(q)]`; its de-interleaved output is
//! the next prior, and after the last iteration it is the bit logit.

mod interleaver;
mod model;
pub mod packed;

pub use interleaver::Interleaver;
pub use model::{
    Architecture, BatchNorm, CodecModel, ConvStack, ConvUnit, Decoded, Decoder, Encoder, PowerNorm,
    BN_EPS, BN_MOMENTUM, POWER_EPS, STREAMS,
};
pub(crate) use model::{apply_moments, StackTrace};
pub use packed::{freeze_for_edge, PackedDecoder};
