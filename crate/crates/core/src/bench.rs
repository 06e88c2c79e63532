//! Wall-clock comparison of float and packed decoding.

use std::fmt;
use std::time::Instant;

use crate::channel::NoiseStream;
use crate::codec::{freeze_for_edge, Architecture, CodecModel, PackedDecoder, STREAMS};
use crate::cost::cost_report;
use crate::error::{Error, Result};
use crate::quantize::QuantMode;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    /// Blocks per decode call.
    pub batch: usize,
    /// Decode calls per timed repetition.
    pub iters: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch: 16,
            iters: 4,
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mode: QuantMode,
    pub blocks: usize,
    /// Blocks per second of each repetition.
    pub float_rates: Vec<f64>,
    pub packed_rates: Vec<f64>,
    /// Real-valued FLOPs per decoded block (same figure as the cost report).
    pub flops_per_block: u64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Coefficient of variation (population std / mean).
pub fn coefficient_of_variation(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

impl BenchReport {
    pub fn float_rate(&self) -> f64 {
        median(&self.float_rates)
    }

    pub fn packed_rate(&self) -> f64 {
        median(&self.packed_rates)
    }

    /// Median packed throughput over median float throughput.
    pub fn speedup(&self) -> f64 {
        self.packed_rate() / self.float_rate()
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode              {}", self.mode)?;
        writeln!(f, "blocks/rep        {}", self.blocks)?;
        writeln!(f, "float FLOPs/block {:.3e}", self.flops_per_block as f64)?;
        writeln!(
            f,
            "float             {:.1} blocks/s (cv {:.1}%)",
            self.float_rate(),
            100.0 * coefficient_of_variation(&self.float_rates)
        )?;
        writeln!(
            f,
            "packed            {:.1} blocks/s (cv {:.1}%)",
            self.packed_rate(),
            100.0 * coefficient_of_variation(&self.packed_rates)
        )?;
        write!(f, "speedup           {:.1}x", self.speedup())
    }
}

fn random_inputs(arch: &Architecture, batch: usize, seed: u64) -> Result<Tensor> {
    let mut rng = NoiseStream::new(seed, 0xbe);
    let mut z = vec![0.0; batch * STREAMS * arch.block_len];
    rng.fill_normal(&mut z);
    Tensor::new(vec![batch, STREAMS, arch.block_len], z)
}

fn time_rate(mut f: impl FnMut() -> Result<()>, iters: usize, blocks: usize) -> Result<f64> {
    let t = Instant::now();
    for _ in 0..iters {
        f()?;
    }
    Ok(blocks as f64 / t.elapsed().as_secs_f64().max(1e-12))
}

/// Times float and packed decoding of the same random channel outputs,
/// alternating the two paths within each repetition after one warm-up.
pub fn bench_decode(model: &CodecModel, packed: &PackedDecoder, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.batch == 0 || cfg.iters == 0 || cfg.reps == 0 {
        return Err(Error::Validation {
            key: "iters",
            msg: "batch, iters and reps must be >= 1".into(),
        });
    }
    let z = random_inputs(&model.arch, cfg.batch, cfg.seed)?;
    model.decode(&z)?;
    packed.decode(&z)?;
    let blocks = cfg.batch * cfg.iters;
    let mut float_rates = Vec::with_capacity(cfg.reps);
    let mut packed_rates = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        float_rates.push(time_rate(|| model.decode(&z).map(drop), cfg.iters, blocks)?);
        packed_rates.push(time_rate(|| packed.decode(&z).map(drop), cfg.iters, blocks)?);
    }
    Ok(BenchReport {
        mode: model.mode,
        blocks,
        float_rates,
        packed_rates,
        flops_per_block: cost_report(&model.arch, QuantMode::Real, 1).flops_real,
    })
}

/// Benchmark on an untrained model of the given shape (weights random).
pub fn bench_shapes(arch: Architecture, mode: QuantMode, cfg: &BenchConfig) -> Result<BenchReport> {
    let model = CodecModel::new(arch, mode, cfg.seed)?;
    let packed = freeze_for_edge(&model)?;
    bench_decode(&model, &packed, cfg)
}
