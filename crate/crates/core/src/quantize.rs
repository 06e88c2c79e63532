//! Binarization, ternarization, straight-through gradients, latent clipping
//! and post-training q-bit quantization.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Threshold multiplier for ternarization: `Δ = 0.7 · mean|r|`.
pub const TERNARY_DELTA_SCALE: f64 = 0.7;

/// Supported post-training quantization widths.
pub const POST_QUANT_BITS: [u8; 4] = [1, 2, 4, 8];

/// How a model's decoder weights (and activations) are represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantMode {
    Real,
    Binary,
    Ternary,
    /// Real network whose decoder weights were snapped to a q-bit codebook.
    PostQuant(u8),
}

impl QuantMode {
    pub fn post_quant(bits: u8) -> Result<Self> {
        if POST_QUANT_BITS.contains(&bits) {
            Ok(QuantMode::PostQuant(bits))
        } else {
            Err(Error::InvalidArgument(format!(
                "post-quantization supports q in {:?}, got {}",
                POST_QUANT_BITS, bits
            )))
        }
    }

    /// Binary and ternary decoders use sign activations and quantized weights.
    pub fn is_bitwise(self) -> bool {
        matches!(self, QuantMode::Binary | QuantMode::Ternary)
    }

    /// Storage bits per decoder weight.
    pub fn bits_per_weight(self) -> u32 {
        match self {
            QuantMode::Real => 64,
            QuantMode::Binary | QuantMode::Ternary => 1,
            QuantMode::PostQuant(q) => q as u32,
        }
    }

    /// Quantized view of a latent weight tensor for this mode.
    pub fn weight_view(self, latent: &Tensor) -> Result<Tensor> {
        match self {
            QuantMode::Binary => Ok(binarize(latent)),
            QuantMode::Ternary => ternarize(latent),
            QuantMode::Real | QuantMode::PostQuant(_) => Ok(latent.clone()),
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            QuantMode::Real => 0,
            QuantMode::Binary => 1,
            QuantMode::Ternary => 2,
            QuantMode::PostQuant(q) => 0x100 | q as u32,
        }
    }

    pub(crate) fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(QuantMode::Real),
            1 => Ok(QuantMode::Binary),
            2 => Ok(QuantMode::Ternary),
            c if c & 0x100 != 0 => QuantMode::post_quant((c & 0xff) as u8),
            c => Err(Error::Container(format!("unknown mode code {}", c))),
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantMode::Real => f.write_str("real"),
            QuantMode::Binary => f.write_str("binary"),
            QuantMode::Ternary => f.write_str("ternary"),
            QuantMode::PostQuant(q) => write!(f, "quant{}", q),
        }
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(QuantMode::Real),
            "binary" => Ok(QuantMode::Binary),
            "ternary" => Ok(QuantMode::Ternary),
            other => match other.strip_prefix("quant").map(str::parse::<u8>) {
                Some(Ok(q)) => QuantMode::post_quant(q),
                _ => Err(Error::InvalidArgument(format!("unknown mode `{}`", s))),
            },
        }
    }
}

/// Trainable shadow weights behind a quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentWeights {
    pub real: Tensor,
}

impl LatentWeights {
    pub fn new(real: Tensor) -> Self {
        LatentWeights { real }
    }

    pub fn view(&self, mode: QuantMode) -> Result<Tensor> {
        mode.weight_view(&self.real)
    }
}

/// `+1` if `r ≥ 0`, else `−1`, elementwise.
pub fn binarize(r: &Tensor) -> Tensor {
    r.map(crate::autodiff::sign)
}

/// Straight-through gradient: `grad_b` where `|r| ≤ 1`, zero elsewhere.
pub fn ste_backward(grad_b: &Tensor, r: &Tensor) -> Result<Tensor> {
    if grad_b.shape() != r.shape() {
        return Err(Error::shape(
            "ste_backward",
            format!("{:?} vs {:?}", grad_b.shape(), r.shape()),
        ));
    }
    Tensor::new(r.shape().to_vec(), ste_mask(grad_b.data(), r.data()))
}

pub(crate) fn ste_mask(grad: &[f64], r: &[f64]) -> Vec<f64> {
    grad.iter()
        .zip(r)
        .map(|(&g, &v)| if v.abs() <= 1.0 { g } else { 0.0 })
        .collect()
}

/// Ternarization threshold `Δ = multiplier · mean|r|`.
pub fn ternary_delta(r: &Tensor, multiplier: f64) -> f64 {
    multiplier * r.mean_abs()
}

/// `+1` if `r > Δ`, `0` if `|r| ≤ Δ`, `−1` if `r < −Δ`, with `Δ = 0.7 · mean|r|`
/// over the whole tensor.
pub fn ternarize(r: &Tensor) -> Result<Tensor> {
    ternarize_with(r, TERNARY_DELTA_SCALE)
}

pub fn ternarize_with(r: &Tensor, multiplier: f64) -> Result<Tensor> {
    if r.is_empty() {
        return Err(Error::InvalidArgument("cannot ternarize an empty tensor".into()));
    }
    let delta = ternary_delta(r, multiplier);
    if delta == 0.0 {
        log::warn!("ternarize: all-zero tensor, Δ = 0");
    }
    Ok(r.map(|v| {
        if v > delta {
            1.0
        } else if v < -delta {
            -1.0
        } else {
            0.0
        }
    }))
}

/// Clamps latent reals to `[−1, 1]` in place.
pub fn clip_latent(w: &mut LatentWeights) {
    clip_unit(&mut w.real);
}

pub(crate) fn clip_unit(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
}

/// A tensor stored as q-bit codebook indices plus the per-tensor scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub bits: u8,
    pub scale: f64,
    pub shape: Vec<usize>,
    pub codes: Vec<u8>,
}

/// Level `i` of the symmetric uniform codebook `s · (2i − (2^q − 1)) / (2^q − 1)`.
pub fn codebook_level(scale: f64, bits: u8, i: u32) -> f64 {
    let top = (1i64 << bits) - 1;
    match i as i64 {
        0 => -scale,
        i if i == top => scale,
        i => scale * (2 * i - top) as f64 / top as f64,
    }
}

impl QuantizedTensor {
    /// Nearest-level encoding; ties go to the smaller-magnitude level (the
    /// positive one when magnitudes are equal), and q = 1 reduces to
    /// `s · sign(w)`.
    pub fn encode(w: &Tensor, bits: u8) -> Result<Self> {
        QuantMode::post_quant(bits)?;
        if w.is_empty() {
            return Err(Error::InvalidArgument("cannot quantize an empty tensor".into()));
        }
        let scale = w.max_abs();
        let top = (1u32 << bits) - 1;
        let codes = w
            .data()
            .iter()
            .map(|&v| {
                if scale == 0.0 {
                    // every level collapses onto zero
                    return (top / 2 + 1).min(top) as u8;
                }
                if bits == 1 {
                    return if v >= 0.0 { 1 } else { 0 };
                }
                let pos = (v / scale + 1.0) * top as f64 / 2.0;
                let lo = (pos.floor().max(0.0) as u32).min(top);
                let hi = (lo + 1).min(top);
                let (l_lo, l_hi) = (codebook_level(scale, bits, lo), codebook_level(scale, bits, hi));
                let (d_lo, d_hi) = ((v - l_lo).abs(), (v - l_hi).abs());
                let pick = if d_lo < d_hi {
                    lo
                } else if d_hi < d_lo {
                    hi
                } else if l_lo.abs() < l_hi.abs() {
                    lo
                } else {
                    hi
                };
                pick as u8
            })
            .collect();
        Ok(QuantizedTensor {
            bits,
            scale,
            shape: w.shape().to_vec(),
            codes,
        })
    }

    pub fn decode(&self) -> Tensor {
        let data = self
            .codes
            .iter()
            .map(|&c| codebook_level(self.scale, self.bits, c as u32))
            .collect();
        Tensor::new(self.shape.clone(), data).expect("codes match shape")
    }
}

/// Per-tensor symmetric uniform q-bit quantization (scale `max|w|`).
pub fn post_quantize(w: &Tensor, bits: u8) -> Result<Tensor> {
    Ok(QuantizedTensor::encode(w, bits)?.decode())
}
