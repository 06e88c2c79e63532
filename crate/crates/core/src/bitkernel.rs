//! Bitpacked binary/ternary inference: bitplanes, xnor-popcount dot
//! products, and packed same-padded 1D convolution.
//!
//! Bit convention: logical `+1` is bit 1, `−1` is bit 0, LSB-first within
//! a word and little-endian word order. Padding bits past `n_valid` are
//! always zero and every reduction masks them out.
//!
//! A convolution tap is a dot product between an input column (one
//! bitplane over channels) and a per-`(c_out, tap)` weight plane. Packed
//! activations store word `w` of every column contiguously, so the kernel
//! sweeps one weight word across a run of positions. Taps that fall on zero
//! padding are skipped, which is exactly a pad contributing 0 under ±1
//! semantics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::autodiff::ConvLayerSpec;

#[inline]
fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Mask with the low `n_valid mod 64` bits set in the final word.
#[inline]
fn valid_word(n_valid: usize, word: usize) -> u64 {
    let full = n_valid / 64;
    if word < full {
        u64::MAX
    } else if word == full {
        let rem = n_valid % 64;
        if rem == 0 {
            0
        } else {
            (1u64 << rem) - 1
        }
    } else {
        0
    }
}

/// Packed vector of ±1 values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlane {
    words: Vec<u64>,
    n_valid: usize,
}

impl BitPlane {
    pub fn from_words(words: Vec<u64>, n_valid: usize) -> Result<Self> {
        if words.len() != words_for(n_valid) {
            return Err(Error::shape(
                "bitplane",
                format!("{} words cannot hold exactly {} bits", words.len(), n_valid),
            ));
        }
        if let Some(last) = words.last() {
            if last & !valid_word(n_valid, words.len() - 1) != 0 {
                return Err(Error::InvalidArgument("bitplane padding bits must be zero".into()));
            }
        }
        Ok(BitPlane { words, n_valid })
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn n_valid(&self) -> usize {
        self.n_valid
    }

    /// All valid bits set.
    pub fn ones(n_valid: usize) -> Self {
        let words = (0..words_for(n_valid)).map(|w| valid_word(n_valid, w)).collect();
        BitPlane { words, n_valid }
    }

    pub fn zeros(n_valid: usize) -> Self {
        BitPlane {
            words: vec![0; words_for(n_valid)],
            n_valid,
        }
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// ±1 view; bit 1 is `+1`.
    pub fn unpack(&self) -> Vec<f64> {
        (0..self.n_valid)
            .map(|i| if self.get(i) { 1.0 } else { -1.0 })
            .collect()
    }

    /// Bitwise complement of the valid bits.
    pub fn complement(&self) -> Self {
        let words = self
            .words
            .iter()
            .enumerate()
            .map(|(w, &v)| !v & valid_word(self.n_valid, w))
            .collect();
        BitPlane {
            words,
            n_valid: self.n_valid,
        }
    }

    fn set_bits(values: &[f64], pred: impl Fn(f64) -> bool) -> Self {
        let mut words = vec![0u64; words_for(values.len())];
        for (i, &v) in values.iter().enumerate() {
            if pred(v) {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        BitPlane {
            words,
            n_valid: values.len(),
        }
    }
}

/// Packs a ±1 vector; bit `i` is set iff `v[i] = +1`.
pub fn pack_bits(v: &[f64]) -> Result<BitPlane> {
    if let Some(bad) = v.iter().find(|&&x| x != 1.0 && x != -1.0) {
        return Err(Error::InvalidArgument(format!("pack_bits: {} is not ±1", bad)));
    }
    Ok(BitPlane::set_bits(v, |x| x == 1.0))
}

/// Packs a {−1, 0, +1} vector into `(sign, support)` planes in canonical form
/// (sign bits are zero wherever the support bit is zero).
pub fn pack_ternary(v: &[f64]) -> Result<(BitPlane, BitPlane)> {
    if let Some(bad) = v.iter().find(|&&x| x != 1.0 && x != -1.0 && x != 0.0) {
        return Err(Error::InvalidArgument(format!("pack_ternary: {} is not ternary", bad)));
    }
    Ok((
        BitPlane::set_bits(v, |x| x == 1.0),
        BitPlane::set_bits(v, |x| x != 0.0),
    ))
}

/// `Σ aᵢwᵢ` over ±1 semantics: `2·popcount(xnor(a, w) & valid) − n_valid`.
pub fn xnor_dot(a: &BitPlane, w: &BitPlane) -> Result<i64> {
    if a.n_valid != w.n_valid {
        return Err(Error::shape(
            "xnor_dot",
            format!("{} vs {} bits", a.n_valid, w.n_valid),
        ));
    }
    let agree: u32 = a
        .words
        .iter()
        .zip(&w.words)
        .enumerate()
        .map(|(i, (&x, &y))| (!(x ^ y) & valid_word(a.n_valid, i)).count_ones())
        .sum();
    Ok(2 * agree as i64 - a.n_valid as i64)
}

/// `Σ tᵢaᵢ` with ternary `t` given as sign and support planes:
/// `2·popcount(xnor(a, sign) & mask) − popcount(mask)`.
pub fn ternary_dot(a: &BitPlane, w_sign: &BitPlane, w_mask: &BitPlane) -> Result<i64> {
    if a.n_valid != w_sign.n_valid || a.n_valid != w_mask.n_valid {
        return Err(Error::shape("ternary_dot", "plane lengths differ"));
    }
    if w_sign.words.iter().zip(&w_mask.words).any(|(&s, &m)| s & !m != 0) {
        return Err(Error::InvalidArgument(
            "ternary_dot: sign bit set where the support mask is zero".into(),
        ));
    }
    let (mut agree, mut support) = (0u32, 0u32);
    for ((&x, &s), &m) in a.words.iter().zip(&w_sign.words).zip(&w_mask.words) {
        agree += (!(x ^ s) & m).count_ones();
        support += m.count_ones();
    }
    Ok(2 * agree as i64 - support as i64)
}

/// Binary activations of one sample, `[channels × len]`. Words are stored
/// plane-major: word `w` of every position, then word `w + 1`, so bit
/// `c % 64` of `words[(c / 64) · len + j]` is channel `c` at position `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedActivations {
    channels: usize,
    len: usize,
    words: Vec<u64>,
}

impl PackedActivations {
    /// Packs signs of a `[channels, len]` row-major buffer (`v ≥ 0` is bit 1).
    pub fn from_signs(values: &[f64], channels: usize, len: usize) -> Result<Self> {
        if values.len() != channels * len {
            return Err(Error::shape("pack activations", "buffer size != channels * len"));
        }
        let mut words = vec![0u64; words_for(channels) * len];
        for c in 0..channels {
            let row = &values[c * len..(c + 1) * len];
            let plane = &mut words[c / 64 * len..(c / 64 + 1) * len];
            for (w, &v) in plane.iter_mut().zip(row) {
                *w |= ((v >= 0.0) as u64) << (c % 64);
            }
        }
        Ok(PackedActivations { channels, len, words })
    }

    fn bit(&self, c: usize, j: usize) -> bool {
        self.words[c / 64 * self.len + j] >> (c % 64) & 1 == 1
    }

    /// ±1 values in `[channels, len]` order.
    pub fn to_signs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channels * self.len];
        for c in 0..self.channels {
            for j in 0..self.len {
                out[c * self.len + j] = if self.bit(c, j) { 1.0 } else { -1.0 };
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The channel bitplane at position `j`.
    pub fn column(&self, j: usize) -> BitPlane {
        BitPlane {
            words: (0..words_for(self.channels)).map(|w| self.words[w * self.len + j]).collect(),
            n_valid: self.channels,
        }
    }
}

/// Deployable binary or ternary convolution layer.
///
/// Weight planes run over input channels, one per `(c_out, tap)`. Binary
/// layers carry an all-ones support mask; ternary layers carry the nonzero
/// pattern and keep sign bits zero under mask-0 positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedConvLayer {
    spec: ConvLayerSpec,
    ternary: bool,
    words_per_col: usize,
    sign_words: Vec<u64>,
    mask_words: Vec<u64>,
    mask_counts: Vec<i32>,
    bias_code: Vec<i32>,
}

impl PackedConvLayer {
    /// Packs `[c_out, c_in, k]` weights in {−1, +1} (binary) or {−1, 0, +1}
    /// (ternary) and an integer-valued bias.
    pub fn from_weights(spec: ConvLayerSpec, weights: &Tensor, bias: Option<&Tensor>, ternary: bool) -> Result<Self> {
        spec.validate()?;
        if weights.shape() != spec.weight_shape() {
            return Err(Error::shape(
                "PackedConvLayer",
                format!("weights {:?} vs {:?}", weights.shape(), spec.weight_shape()),
            ));
        }
        let (c_out, c_in, k) = (spec.c_out, spec.c_in, spec.kernel);
        let wpc = words_for(c_in);
        let mut sign_words = Vec::with_capacity(c_out * k * wpc);
        let mut mask_words = Vec::with_capacity(c_out * k * wpc);
        let w = weights.data();
        let mut col = vec![0.0; c_in];
        for o in 0..c_out {
            for t in 0..k {
                for (i, slot) in col.iter_mut().enumerate() {
                    *slot = w[(o * c_in + i) * k + t];
                }
                let (s, m) = if ternary {
                    pack_ternary(&col)?
                } else {
                    (pack_bits(&col)?, BitPlane::ones(c_in))
                };
                sign_words.extend_from_slice(&s.words);
                mask_words.extend_from_slice(&m.words);
            }
        }
        let bias_code = match bias {
            None => vec![0; c_out],
            Some(b) => {
                if b.len() != c_out {
                    return Err(Error::shape("PackedConvLayer", "bias length != c_out"));
                }
                b.data()
                    .iter()
                    .map(|&v| {
                        if v.fract() != 0.0 || v.abs() > i32::MAX as f64 {
                            Err(Error::InvalidArgument(format!("bias {} is not an integer code", v)))
                        } else {
                            Ok(v as i32)
                        }
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok(Self::assemble(spec, ternary, sign_words, mask_words, bias_code))
    }

    fn assemble(spec: ConvLayerSpec, ternary: bool, sign_words: Vec<u64>, mask_words: Vec<u64>, bias_code: Vec<i32>) -> Self {
        let wpc = words_for(spec.c_in);
        let mask_counts = mask_words
            .chunks(wpc)
            .map(|c| c.iter().map(|w| w.count_ones() as i32).sum())
            .collect();
        PackedConvLayer {
            spec,
            ternary,
            words_per_col: wpc,
            sign_words,
            mask_words,
            mask_counts,
            bias_code,
        }
    }

    /// Rebuilds a layer from raw planes, checking the canonical-form invariants.
    pub fn from_raw(spec: ConvLayerSpec, ternary: bool, sign_words: Vec<u64>, mask_words: Vec<u64>, bias_code: Vec<i32>) -> Result<Self> {
        spec.validate()?;
        let wpc = words_for(spec.c_in);
        let n = spec.c_out * spec.kernel * wpc;
        if sign_words.len() != n || mask_words.len() != n || bias_code.len() != spec.c_out {
            return Err(Error::shape("PackedConvLayer", "plane counts do not match the spec"));
        }
        for (idx, (&s, &m)) in sign_words.iter().zip(&mask_words).enumerate() {
            let valid = valid_word(spec.c_in, idx % wpc);
            if s & !m != 0 || m & !valid != 0 {
                return Err(Error::InvalidArgument("non-canonical packed weights".into()));
            }
            if !ternary && m != valid {
                return Err(Error::InvalidArgument("binary layer must have a full support mask".into()));
            }
        }
        Ok(Self::assemble(spec, ternary, sign_words, mask_words, bias_code))
    }

    pub fn spec(&self) -> &ConvLayerSpec {
        &self.spec
    }

    pub fn is_ternary(&self) -> bool {
        self.ternary
    }

    pub fn sign_words(&self) -> &[u64] {
        &self.sign_words
    }

    pub fn mask_words(&self) -> &[u64] {
        &self.mask_words
    }

    pub fn bias_code(&self) -> &[i32] {
        &self.bias_code
    }

    fn plane_range(&self, o: usize, t: usize) -> std::ops::Range<usize> {
        let start = (o * self.spec.kernel + t) * self.words_per_col;
        start..start + self.words_per_col
    }

    pub fn weight_sign_plane(&self, o: usize, t: usize) -> BitPlane {
        BitPlane {
            words: self.sign_words[self.plane_range(o, t)].to_vec(),
            n_valid: self.spec.c_in,
        }
    }

    pub fn nonzero_mask_plane(&self, o: usize, t: usize) -> BitPlane {
        BitPlane {
            words: self.mask_words[self.plane_range(o, t)].to_vec(),
            n_valid: self.spec.c_in,
        }
    }

    /// Negates every weight and the bias of output channel `o`.
    pub fn negate_channel(&mut self, o: usize) {
        for t in 0..self.spec.kernel {
            for i in self.plane_range(o, t) {
                self.sign_words[i] ^= self.mask_words[i];
            }
        }
        self.bias_code[o] = -self.bias_code[o];
    }

    /// Weight bits stored (one per weight).
    pub fn storage_bits(&self) -> u64 {
        self.spec.weight_count() as u64
    }

    /// Largest possible |pre-activation|.
    pub fn max_abs_preactivation(&self) -> i64 {
        (self.spec.c_in * self.spec.kernel) as i64
            + self.bias_code.iter().map(|b| b.unsigned_abs() as i64).max().unwrap_or(0)
    }
}

/// Adds `2·agree − sub` for one weight word against a run of positions of
/// one activation plane.
#[inline(always)]
fn plane_counts(plane: &[u64], s: u64, m: u64, sub: i32, row: &mut [i32]) {
    for (acc, &x) in row.iter_mut().zip(plane) {
        // counts are bounded by c_in·k, far inside i32
        *acc = acc.wrapping_add(2 * (!(x ^ s) & m).count_ones() as i32).wrapping_sub(sub);
    }
}

#[inline(always)]
fn counts_kernel(x: &PackedActivations, layer: &PackedConvLayer, out: &mut [i32]) {
    let (c_out, k, h) = (layer.spec.c_out, layer.spec.kernel, x.len);
    let pad = (k - 1) / 2;
    let wpc = layer.words_per_col;
    for o in 0..c_out {
        let row = &mut out[o * h..(o + 1) * h];
        row.fill(layer.bias_code[o]);
        for t in 0..k {
            // output j reads input j + t − pad
            let lo = pad.saturating_sub(t).min(h);
            let hi = (h + pad).saturating_sub(t).min(h).max(lo);
            if lo == hi {
                continue;
            }
            let src_lo = lo + t - pad;
            let base = (o * k + t) * wpc;
            let support = layer.mask_counts[o * k + t];
            let r = &mut row[lo..hi];
            for i in 0..wpc {
                let plane = &x.words[i * h + src_lo..i * h + src_lo + (hi - lo)];
                let sub = if i == 0 { support } else { 0 };
                plane_counts(plane, layer.sign_words[base + i], layer.mask_words[base + i], sub, r);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn counts_kernel_popcnt(x: &PackedActivations, layer: &PackedConvLayer, out: &mut [i32]) {
    counts_kernel(x, layer, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt,avx2,avx512f,avx512vl,avx512bw,avx512vpopcntdq")]
unsafe fn counts_kernel_avx512(x: &PackedActivations, layer: &PackedConvLayer, out: &mut [i32]) {
    counts_kernel(x, layer, out)
}

fn run_counts(x: &PackedActivations, layer: &PackedConvLayer, out: &mut [i32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512vpopcntdq") && std::arch::is_x86_feature_detected!("avx512bw") {
            // SAFETY: every enabled feature was detected just above.
            unsafe { counts_kernel_avx512(x, layer, out) };
            return;
        }
        if std::arch::is_x86_feature_detected!("popcnt") {
            // SAFETY: the CPU supports popcnt, checked just above.
            unsafe { counts_kernel_popcnt(x, layer, out) };
            return;
        }
    }
    counts_kernel(x, layer, out)
}

/// Integer pre-activations `[c_out, len]` of a packed convolution.
pub fn packed_conv1d_counts(x: &PackedActivations, layer: &PackedConvLayer) -> Result<Vec<i32>> {
    if x.channels != layer.spec.c_in {
        return Err(Error::shape(
            "packed_conv1d",
            format!("input has {} channels, layer expects {}", x.channels, layer.spec.c_in),
        ));
    }
    let mut out = vec![0i32; layer.spec.c_out * x.len];
    run_counts(x, layer, &mut out);
    Ok(out)
}

/// Packed convolution with fused sign activation: output bit is 1 iff the
/// pre-activation count is at least the channel's threshold.
pub fn packed_conv1d(x: &PackedActivations, layer: &PackedConvLayer, thresholds: &[i32]) -> Result<PackedActivations> {
    if thresholds.len() != layer.spec.c_out {
        return Err(Error::shape(
            "packed_conv1d",
            format!("{} thresholds for {} output channels", thresholds.len(), layer.spec.c_out),
        ));
    }
    let counts = packed_conv1d_counts(x, layer)?;
    let (c_out, h) = (layer.spec.c_out, x.len);
    let mut words = vec![0u64; words_for(c_out) * h];
    for (o, &th) in thresholds.iter().enumerate() {
        let row = &counts[o * h..(o + 1) * h];
        let plane = &mut words[o / 64 * h..(o / 64 + 1) * h];
        for (w, &v) in plane.iter_mut().zip(row) {
            *w |= ((v >= th) as u64) << (o % 64);
        }
    }
    Ok(PackedActivations {
        channels: c_out,
        len: h,
        words,
    })
}

/// Integer threshold equivalent to `sign(v · scale + shift)` over the
/// integer pre-activations `v ∈ [−max_abs, max_abs]`, evaluated with the same
/// float expression as the float path. Returns `(threshold, negate)`: when
/// `negate` is set the channel's weights and bias must be negated first so
/// the comparison stays `≥`.
pub fn fold_threshold(scale: f64, shift: f64, max_abs: i64) -> (i32, bool) {
    let fires = |v: i64| (v as f64) * scale + shift >= 0.0;
    let (lo, hi) = (-max_abs, max_abs);
    if scale > 0.0 {
        if fires(lo) {
            return (i32::MIN, false);
        }
        match (lo..=hi).find(|&v| fires(v)) {
            Some(v) => (v as i32, false),
            None => (i32::MAX, false),
        }
    } else if scale < 0.0 {
        // fires on v <= V; with u = -v this is u >= -V
        if fires(hi) {
            return (i32::MIN, true);
        }
        match (lo..=hi).rev().find(|&v| fires(v)) {
            Some(v) => (-v as i32, true),
            None => (i32::MAX, true),
        }
    } else if shift >= 0.0 {
        (i32::MIN, false)
    } else {
        (i32::MAX, false)
    }
}

/// A packed layer with its folded per-channel thresholds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdLayer {
    pub layer: PackedConvLayer,
    pub thresholds: Vec<i32>,
}

impl ThresholdLayer {
    /// Folds a per-channel affine `v · scale + shift` followed by sign into
    /// integer thresholds, negating channels whose scale is negative.
    pub fn fold(mut layer: PackedConvLayer, scale: &[f64], shift: &[f64]) -> Result<Self> {
        if scale.len() != layer.spec.c_out || shift.len() != layer.spec.c_out {
            return Err(Error::shape("fold", "affine length != c_out"));
        }
        let max_abs = layer.max_abs_preactivation() + 1;
        let mut thresholds = Vec::with_capacity(scale.len());
        for o in 0..scale.len() {
            let (th, negate) = fold_threshold(scale[o], shift[o], max_abs);
            if negate {
                layer.negate_channel(o);
            }
            thresholds.push(th);
        }
        Ok(ThresholdLayer { layer, thresholds })
    }

    pub fn forward(&self, x: &PackedActivations) -> Result<PackedActivations> {
        packed_conv1d(x, &self.layer, &self.thresholds)
    }
}
