//! Compressed turbo-autoencoder channel codes.
//!
//! Trains interleaved CNN encoders and iterative CNN decoders over a
//! simulated AWGN channel, compresses the decoder to binary or ternary
//! weights with binary activations, deploys it as xnor-popcount kernels,
//! bags several weak decoders, and measures BER/BLER and cost.

pub mod autodiff;
pub mod bench;
pub mod bitkernel;
pub mod bytes;
pub mod channel;
pub mod codec;
pub mod config;
pub mod container;
pub mod cost;
pub mod ensemble;
pub mod error;
pub mod kernels;
pub mod optim;
pub mod parallel;
pub mod quantize;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
