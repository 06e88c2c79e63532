//! Monte Carlo BER/BLER sweeps over an SNR grid.
//!
//! Each SNR point draws messages and noise in fixed-size chunks from its own
//! counter-based streams and stops once `target_bit_errors` errors have been
//! seen or `blocks_per_point` blocks simulated. Points run in parallel;
//! rows come back in grid order.

use std::io::Write;

use crate::channel::{measure, snr_db_to_sigma2, ErrorStats, NoiseStream};
use crate::codec::{CodecModel, Decoded, PackedDecoder, STREAMS};
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;
use crate::train::stream_id;

const TAG_SWEEP: u64 = 0x21;

/// Anything that maps ±1 messages to channel symbols and back.
pub trait BlockCodec: Sync {
    fn block_len(&self) -> usize;
    fn encode(&self, u: &Tensor) -> Result<Tensor>;
    fn decode(&self, z: &Tensor) -> Result<Decoded>;
}

impl BlockCodec for CodecModel {
    fn block_len(&self) -> usize {
        self.arch.block_len
    }
    fn encode(&self, u: &Tensor) -> Result<Tensor> {
        CodecModel::encode(self, u)
    }
    fn decode(&self, z: &Tensor) -> Result<Decoded> {
        CodecModel::decode(self, z)
    }
}

impl BlockCodec for EnsembleModel {
    fn block_len(&self) -> usize {
        self.members()[0].arch.block_len
    }
    fn encode(&self, u: &Tensor) -> Result<Tensor> {
        EnsembleModel::encode(self, u)
    }
    fn decode(&self, z: &Tensor) -> Result<Decoded> {
        EnsembleModel::decode(self, z)
    }
}

/// A float encoder paired with a packed edge decoder.
#[derive(Debug, Clone)]
pub struct EdgeSystem<'a> {
    pub encoder: &'a CodecModel,
    pub decoder: &'a PackedDecoder,
}

impl BlockCodec for EdgeSystem<'_> {
    fn block_len(&self) -> usize {
        self.encoder.arch.block_len
    }
    fn encode(&self, u: &Tensor) -> Result<Tensor> {
        self.encoder.encode(u)
    }
    fn decode(&self, z: &Tensor) -> Result<Decoded> {
        self.decoder.decode(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub snr_start: f64,
    pub snr_end: f64,
    pub snr_step: f64,
    pub blocks_per_point: usize,
    /// Early-stop threshold per point; 0 disables early stopping.
    pub target_bit_errors: u64,
    /// Blocks simulated per chunk.
    pub chunk_blocks: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            snr_start: -2.0,
            snr_end: 4.0,
            snr_step: 1.0,
            blocks_per_point: 2000,
            target_bit_errors: 100,
            chunk_blocks: 100,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_step > 0.0) {
            return Err(Error::Validation {
                key: "snr_step",
                msg: format!("must be > 0, got {}", self.snr_step),
            });
        }
        if self.snr_end < self.snr_start {
            return Err(Error::Validation {
                key: "snr_end",
                msg: "must be >= snr_start".into(),
            });
        }
        if self.blocks_per_point == 0 {
            return Err(Error::Validation {
                key: "blocks_per_point",
                msg: "must be >= 1".into(),
            });
        }
        if self.chunk_blocks == 0 {
            return Err(Error::Validation {
                key: "chunk_blocks",
                msg: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    /// Grid points `start, start + step, …, ≤ end`, rounded to 1e-9 dB.
    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.snr_end - self.snr_start) / self.snr_step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|i| ((self.snr_start + i as f64 * self.snr_step) * 1e9).round() / 1e9)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub snr_db: f64,
    pub stats: ErrorStats,
}

/// Messages and channel outputs for chunk `chunk` of SNR point `point`.
pub fn chunk_inputs(codec: &dyn BlockCodec, cfg: &SweepConfig, point: usize, snr_db: f64, chunk: usize, blocks: usize) -> Result<(Tensor, Tensor)> {
    let k = codec.block_len();
    let mut rng = NoiseStream::new(cfg.seed, stream_id(TAG_SWEEP, point as u64, chunk as u64));
    let mut bits = vec![0.0; blocks * k];
    rng.fill_bits(&mut bits);
    let u = Tensor::new(vec![blocks, 1, k], bits)?;
    let x = codec.encode(&u)?;
    let sigma = snr_db_to_sigma2(snr_db).sqrt();
    let mut z = x.into_data();
    for v in &mut z {
        *v += sigma * rng.normal();
    }
    Ok((u, Tensor::new(vec![blocks, STREAMS, k], z)?))
}

fn run_point(codec: &dyn BlockCodec, cfg: &SweepConfig, point: usize, snr_db: f64) -> Result<ErrorStats> {
    let mut stats = ErrorStats::default();
    let mut chunk = 0;
    while (stats.blocks as usize) < cfg.blocks_per_point {
        let blocks = cfg.chunk_blocks.min(cfg.blocks_per_point - stats.blocks as usize);
        let (u, z) = chunk_inputs(codec, cfg, point, snr_db, chunk, blocks)?;
        let d = codec.decode(&z)?;
        stats.merge(&measure(&u, &d.hard)?);
        chunk += 1;
        if cfg.target_bit_errors > 0 && stats.bit_errors >= cfg.target_bit_errors {
            break;
        }
    }
    Ok(stats)
}

/// Runs the whole grid.
pub fn sweep(codec: &dyn BlockCodec, cfg: &SweepConfig) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    let grid = cfg.grid();
    let results = parallel::map_indexed(grid.len(), |i| run_point(codec, cfg, i, grid[i]));
    grid.iter()
        .zip(results)
        .map(|(&snr_db, r)| Ok(SweepPoint { snr_db, stats: r? }))
        .collect()
}

pub const CSV_HEADER: &str = "snr_db,ber,bler,bits,blocks";

pub fn write_csv<W: Write>(points: &[SweepPoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", CSV_HEADER)?;
    for p in points {
        writeln!(
            w,
            "{},{:e},{:e},{},{}",
            p.snr_db,
            p.stats.ber(),
            p.stats.bler(),
            p.stats.bits,
            p.stats.blocks
        )?;
    }
    Ok(())
}

pub fn to_csv(points: &[SweepPoint]) -> String {
    let mut buf = Vec::new();
    write_csv(points, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("ascii")
}

/// BER is nonincreasing across the grid, tolerating at most `allowed`
/// inversions that stay within `sigmas` combined standard errors.
pub fn is_monotone(points: &[SweepPoint], sigmas: f64, allowed: usize) -> bool {
    let mut inversions = 0;
    for w in points.windows(2) {
        let (a, b) = (&w[0].stats, &w[1].stats);
        if b.ber() > a.ber() {
            let se = (a.ber_std_error().powi(2) + b.ber_std_error().powi(2)).sqrt();
            if b.ber() - a.ber() > sigmas * se {
                return false;
            }
            inversions += 1;
        }
    }
    inversions <= allowed
}
