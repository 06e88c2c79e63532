//! AWGN channel simulation and BER/BLER bookkeeping.
//!
//! Noise comes from a counter-based generator: ChaCha20 keyed by the seed,
//! with one 64-bit stream id per independent draw site (SNR point, block
//! chunk, training step). Any stream can be regenerated on its own, so
//! parallel workers never overlap and results do not depend on scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `σ² = 10^(−SNR/10)`.
pub fn snr_db_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// `SNR = −10 log₁₀ σ²`.
pub fn sigma2_to_snr_db(sigma2: f64) -> f64 {
    -10.0 * sigma2.log10()
}

/// Channel operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSpec {
    pub snr_db: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl ChannelSpec {
    pub fn from_snr_db(snr_db: f64, seed: u64) -> Self {
        ChannelSpec {
            snr_db,
            sigma: snr_db_to_sigma2(snr_db).sqrt(),
            seed,
        }
    }

    pub fn from_sigma(sigma: f64, seed: u64) -> Self {
        ChannelSpec {
            snr_db: sigma2_to_snr_db(sigma * sigma),
            sigma,
            seed,
        }
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma * self.sigma
    }
}

/// Reproducible uniform/normal draws for one `(seed, stream)` pair.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NoiseStream { rng, spare: None }
    }

    /// Uniform on `(0, 1]`.
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the trigonometric Box–Muller transform; the second
    /// value of each pair is kept for the next call.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = self.normal());
    }

    /// Uniformly random ±1 values.
    pub fn fill_bits(&mut self, out: &mut [f64]) {
        let mut word = 0u64;
        for (i, v) in out.iter_mut().enumerate() {
            if i % 64 == 0 {
                word = self.rng.next_u64();
            }
            *v = if word >> (i % 64) & 1 == 1 { 1.0 } else { -1.0 };
        }
    }
}

/// `z = x + σ·n` with `n` drawn from stream `stream` of the spec's seed.
pub fn awgn(x: &Tensor, spec: &ChannelSpec, stream: u64) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "awgn input" });
    }
    let mut noise = NoiseStream::new(spec.seed, stream);
    let data = x
        .data()
        .iter()
        .map(|&v| v + spec.sigma * noise.normal())
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Accumulated bit and block error counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorStats {
    pub bit_errors: u64,
    pub bits: u64,
    pub block_errors: u64,
    pub blocks: u64,
}

impl ErrorStats {
    pub fn ber(&self) -> f64 {
        if self.bits == 0 {
            0.0
        } else {
            self.bit_errors as f64 / self.bits as f64
        }
    }

    pub fn bler(&self) -> f64 {
        if self.blocks == 0 {
            0.0
        } else {
            self.block_errors as f64 / self.blocks as f64
        }
    }

    /// Binomial standard error of the BER estimate.
    pub fn ber_std_error(&self) -> f64 {
        if self.bits == 0 {
            return 0.0;
        }
        let p = self.ber();
        (p * (1.0 - p) / self.bits as f64).sqrt()
    }

    pub fn merge(&mut self, other: &ErrorStats) {
        self.bit_errors += other.bit_errors;
        self.bits += other.bits;
        self.block_errors += other.block_errors;
        self.blocks += other.blocks;
    }
}

/// Counts errors between transmitted and decided ±1 blocks. The leading axis
/// indexes blocks; a block errs iff any of its bits differs.
pub fn measure(u: &Tensor, u_hat: &Tensor) -> Result<ErrorStats> {
    if u.shape() != u_hat.shape() {
        return Err(Error::shape(
            "measure",
            format!("{:?} vs {:?}", u.shape(), u_hat.shape()),
        ));
    }
    let blocks = u.shape().first().copied().unwrap_or(0);
    let mut stats = ErrorStats::default();
    if blocks == 0 {
        return Ok(stats);
    }
    let k = u.len() / blocks;
    for (a, b) in u.data().chunks(k).zip(u_hat.data().chunks(k)) {
        let errs = a.iter().zip(b).filter(|(x, y)| x != y).count() as u64;
        stats.bit_errors += errs;
        stats.bits += k as u64;
        stats.blocks += 1;
        if errs > 0 {
            stats.block_errors += 1;
        }
    }
    Ok(stats)
}
