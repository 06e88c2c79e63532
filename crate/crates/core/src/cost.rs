//! Analytic storage and operation counts for a decoder.
//!
//! A real layer costs `2·c_in·k·h·c_out` FLOPs; its binary counterpart
//! costs `c_in·k·h·c_out` xnor-count operations, 64 of which fit in one
//! word-wide instruction. Storage is 64 bits per real weight, `q` per
//! post-quantized weight, and 1 per binary or ternary weight.

use std::fmt;

use crate::autodiff::ConvLayerSpec;
use crate::codec::Architecture;
use crate::quantize::QuantMode;

/// Bits of a real (f64) weight.
pub const REAL_BITS: u64 = 64;
/// Binary operations per word-wide instruction.
pub const WORD_BITS: u64 = 64;

/// Megabytes (10⁶ bytes) needed for `params` weights at `bits` each.
pub fn storage_mb(params: u64, bits: u64) -> f64 {
    (params * bits) as f64 / 8.0 / 1e6
}

/// Every decoder convolution for one decoded block.
pub fn decoder_layers(arch: &Architecture, mode: QuantMode) -> Vec<ConvLayerSpec> {
    (0..arch.iterations)
        .flat_map(|i| {
            let last = i + 1 == arch.iterations;
            let mut v = arch.decoder_specs(mode, false);
            v.extend(arch.decoder_specs(mode, last));
            v
        })
        .collect()
}

/// Multiply-accumulates of one layer over a block of length `len`.
pub fn layer_macs(spec: &ConvLayerSpec, len: usize) -> u64 {
    (spec.c_in * spec.kernel * len * spec.c_out) as u64
}

/// Savings summary for a decoder (or a bag of `members` decoders).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub mode: QuantMode,
    pub members: usize,
    /// Weights and biases of one member.
    pub params: u64,
    /// Total over all members.
    pub storage_bits: u64,
    /// FLOPs of one real-valued member decoding one block.
    pub flops_real: u64,
    /// FLOPs the deployed decoder actually executes (0 for bit modes).
    pub flops: u64,
    /// xnor-count operations of all members (0 for float modes).
    pub bitops: u64,
    pub memory_saving_x: f64,
    pub speedup_x: f64,
}

impl CostReport {
    pub fn storage_mb(&self) -> f64 {
        self.storage_bits as f64 / 8.0 / 1e6
    }

    pub const CSV_HEADER: &'static str =
        "mode,members,params,storage_bits,storage_mb,flops,bitops,memory_saving_x,speedup_x";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{},{},{},{}",
            self.mode,
            self.members,
            self.params,
            self.storage_bits,
            self.storage_mb(),
            self.flops,
            self.bitops,
            self.memory_saving_x,
            self.speedup_x
        )
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode            {}", self.mode)?;
        if self.members > 1 {
            writeln!(f, "members         {}", self.members)?;
        }
        writeln!(f, "params          {}", self.params)?;
        writeln!(f, "storage         {} bits ({:.4} MB)", self.storage_bits, self.storage_mb())?;
        if self.bitops > 0 {
            writeln!(f, "ops/block       {:.3e} xnor-count", self.bitops as f64)?;
        } else {
            writeln!(f, "ops/block       {:.3e} FLOPs", self.flops as f64)?;
        }
        writeln!(f, "memory saving   {}x", self.memory_saving_x)?;
        write!(f, "speedup         {}x", self.speedup_x)
    }
}

/// Cost of `members` decoders of the given architecture and mode.
///
/// Bagged members are assumed to run side by side, so the speedup of a bag
/// equals that of one member while storage and bitops scale with `members`.
pub fn cost_report(arch: &Architecture, mode: QuantMode, members: usize) -> CostReport {
    let members = members.max(1);
    let layers = decoder_layers(arch, mode);
    let params: u64 = layers
        .iter()
        .map(|s| (s.weight_count() + s.c_out) as u64)
        .sum();
    let macs: u64 = layers.iter().map(|s| layer_macs(s, arch.block_len)).sum();
    let flops_real = 2 * macs;
    let bits = mode.bits_per_weight() as u64;
    let storage_bits = params * bits * members as u64;
    let (flops, bitops, speedup_x) = if mode.is_bitwise() {
        (0, macs * members as u64, WORD_BITS as f64)
    } else {
        (flops_real * members as u64, 0, 1.0)
    };
    CostReport {
        mode,
        members,
        params,
        storage_bits,
        flops_real,
        flops,
        bitops,
        memory_saving_x: (REAL_BITS * params) as f64 / storage_bits as f64,
        speedup_x,
    }
}
