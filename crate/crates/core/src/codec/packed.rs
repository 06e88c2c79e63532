//! Edge deployment of binary/ternary decoders.
//!
//! Each decoding block becomes: a float first layer (the channel values and
//! priors are real) followed by sign, packed hidden layers whose batch-norm
//! affine and sign are folded into integer thresholds, and a packed output
//! layer whose integer counts go through the batch-norm affine to produce
//! real priors or logits. Every float step uses the same expressions as the
//! training-graph forward pass, so decisions match it bit for bit.

use crate::autodiff::{sigmoid, Activation, ConvLayerSpec};
use crate::bitkernel::{packed_conv1d_counts, PackedActivations, PackedConvLayer, ThresholdLayer};
use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::kernels::{conv1d_forward, ConvGeometry};
use crate::parallel;
use crate::quantize::QuantMode;
use crate::tensor::Tensor;

use super::model::{Architecture, CodecModel, ConvStack, ConvUnit, Decoded, STREAMS};
use super::Interleaver;

/// Real-input layer with quantized weights, followed by the eval-mode
/// normalization and sign.
#[derive(Debug, Clone, PartialEq)]
struct InputLayer {
    spec: ConvLayerSpec,
    weight: Vec<f64>,
    bias: Vec<f64>,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

impl InputLayer {
    /// `[c_in, len]` reals to packed signs.
    fn forward(&self, x: &[f64], len: usize) -> Result<PackedActivations> {
        let geom = ConvGeometry {
            batch: 1,
            c_in: self.spec.c_in,
            c_out: self.spec.c_out,
            kernel: self.spec.kernel,
            len,
        };
        let mut out = vec![0.0; self.spec.c_out * len];
        conv1d_forward(geom, x, &self.weight, Some(&self.bias), &mut out);
        for (o, row) in out.chunks_mut(len).enumerate() {
            for v in row {
                *v = *v * self.scale[o] + self.shift[o];
            }
        }
        PackedActivations::from_signs(&out, self.spec.c_out, len)
    }
}

/// One deployed decoding block.
#[derive(Debug, Clone, PartialEq)]
struct PackedStack {
    input: InputLayer,
    hidden: Vec<ThresholdLayer>,
    output: PackedConvLayer,
    out_scale: Vec<f64>,
    out_shift: Vec<f64>,
}

impl PackedStack {
    fn forward(&self, x: &[f64], len: usize) -> Result<Vec<f64>> {
        let mut a = self.input.forward(x, len)?;
        for layer in &self.hidden {
            a = layer.forward(&a)?;
        }
        let counts = packed_conv1d_counts(&a, &self.output)?;
        let mut out = vec![0.0; counts.len()];
        for (o, (dst, src)) in out.chunks_mut(len).zip(counts.chunks(len)).enumerate() {
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v as f64 * self.out_scale[o] + self.out_shift[o];
            }
        }
        Ok(out)
    }

    fn weight_count(&self) -> usize {
        self.input.weight.len()
            + self.input.bias.len()
            + self
                .hidden
                .iter()
                .map(|l| l.layer.spec().weight_count() + l.layer.spec().c_out)
                .sum::<usize>()
            + self.output.spec().weight_count()
            + self.output.spec().c_out
    }
}

fn unit_affine(unit: &ConvUnit) -> Result<(Vec<f64>, Vec<f64>)> {
    unit.norm
        .as_ref()
        .map(|bn| bn.eval_affine())
        .ok_or_else(|| Error::NotPackable("decoder layer without batch norm".into()))
}

fn freeze_stack(stack: &ConvStack, mode: QuantMode) -> Result<PackedStack> {
    let ternary = mode == QuantMode::Ternary;
    let n = stack.units.len();
    if n < 2 {
        return Err(Error::NotPackable("decoder blocks need at least 2 layers".into()));
    }
    for (i, u) in stack.units.iter().enumerate() {
        let expected = if i + 1 == n {
            Activation::Linear
        } else {
            Activation::SignBinary
        };
        if u.spec.activation != expected {
            return Err(Error::NotPackable(format!(
                "layer {} has {:?} activation, expected {:?}",
                i + 1,
                u.spec.activation,
                expected
            )));
        }
    }
    let first = &stack.units[0];
    let (scale, shift) = unit_affine(first)?;
    let input = InputLayer {
        spec: first.spec,
        weight: mode.weight_view(&first.weight)?.into_data(),
        bias: mode.weight_view(&first.bias)?.into_data(),
        scale,
        shift,
    };
    let pack = |u: &ConvUnit| -> Result<PackedConvLayer> {
        let w = mode.weight_view(&u.weight)?;
        let b = mode.weight_view(&u.bias)?;
        PackedConvLayer::from_weights(u.spec, &w, Some(&b), ternary)
    };
    let mut hidden = Vec::with_capacity(n - 2);
    for u in &stack.units[1..n - 1] {
        let (scale, shift) = unit_affine(u)?;
        hidden.push(ThresholdLayer::fold(pack(u)?, &scale, &shift)?);
    }
    let last = &stack.units[n - 1];
    let (out_scale, out_shift) = unit_affine(last)?;
    Ok(PackedStack {
        input,
        hidden,
        output: pack(last)?,
        out_scale,
        out_shift,
    })
}

/// A binary or ternary decoder in deployable packed form.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedDecoder {
    arch: Architecture,
    mode: QuantMode,
    interleaver: Interleaver,
    blocks: Vec<[PackedStack; 2]>,
}

/// Packs the decoder of a trained binary or ternary model.
pub fn freeze_for_edge(model: &CodecModel) -> Result<PackedDecoder> {
    if !model.mode.is_bitwise() {
        return Err(Error::NotPackable(format!(
            "{} decoders have real activations; only binary and ternary decoders pack",
            model.mode
        )));
    }
    model.validate()?;
    let blocks = model
        .decoder
        .blocks
        .iter()
        .map(|[a, b]| Ok([freeze_stack(a, model.mode)?, freeze_stack(b, model.mode)?]))
        .collect::<Result<_>>()?;
    Ok(PackedDecoder {
        arch: model.arch,
        mode: model.mode,
        interleaver: model.interleaver.clone(),
        blocks,
    })
}

impl PackedDecoder {
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn interleaver(&self) -> &Interleaver {
        &self.interleaver
    }

    /// Weights and biases held by the packed layers.
    pub fn weight_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .map(PackedStack::weight_count)
            .sum()
    }

    /// Logits for one `[3, K]` received block.
    fn decode_one(&self, z: &[f64]) -> Result<Vec<f64>> {
        let k = self.arch.block_len;
        let f = self.arch.features;
        let perm = self.interleaver.perm();
        let (z1, rest) = z.split_at(k);
        let (z2, z3) = rest.split_at(k);
        let z1_pi: Vec<f64> = perm.iter().map(|&p| z1[p]).collect();
        let mut prior = vec![0.0; f * k];
        let mut input = Vec::with_capacity((2 + f) * k);
        for [first, second] in &self.blocks {
            input.clear();
            input.extend_from_slice(z1);
            input.extend_from_slice(z2);
            input.extend_from_slice(&prior);
            let posterior = first.forward(&input, k)?;
            input.clear();
            input.extend_from_slice(&z1_pi);
            input.extend_from_slice(z3);
            for row in posterior.chunks(k) {
                input.extend(perm.iter().map(|&p| row[p]));
            }
            let out = second.forward(&input, k)?;
            prior = vec![0.0; out.len()];
            for (dst, src) in prior.chunks_mut(k).zip(out.chunks(k)) {
                for (j, &p) in perm.iter().enumerate() {
                    dst[p] = src[j];
                }
            }
        }
        Ok(prior)
    }

    /// Decodes `[b, 3, K]` channel outputs; blocks run in parallel.
    pub fn decode(&self, z: &Tensor) -> Result<Decoded> {
        let (b, c, k) = z.dims3()?;
        if c != STREAMS || k != self.arch.block_len {
            return Err(Error::shape(
                "packed decode",
                format!("expected [b, 3, {}], got [{}, {}, {}]", self.arch.block_len, b, c, k),
            ));
        }
        let data = z.data();
        let per_block = parallel::map_indexed(b, |i| self.decode_one(&data[i * c * k..(i + 1) * c * k]));
        let mut soft = Vec::with_capacity(b * k);
        for logits in per_block {
            soft.extend(logits?.into_iter().map(sigmoid));
        }
        Ok(Decoded::from_soft(Tensor::new(vec![b, 1, k], soft)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        write_arch(&mut w, &self.arch);
        w.u32(self.mode.code());
        w.u64(self.interleaver.seed());
        w.u64s(&self.interleaver.perm().iter().map(|&p| p as u64).collect::<Vec<_>>());
        for stack in self.blocks.iter().flat_map(|b| b.iter()) {
            write_spec(&mut w, &stack.input.spec);
            w.f64s(&stack.input.weight);
            w.f64s(&stack.input.bias);
            w.f64s(&stack.input.scale);
            w.f64s(&stack.input.shift);
            w.usize(stack.hidden.len());
            for h in &stack.hidden {
                write_layer(&mut w, &h.layer);
                w.i32s(&h.thresholds);
            }
            write_layer(&mut w, &stack.output);
            w.f64s(&stack.out_scale);
            w.f64s(&stack.out_shift);
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        let arch = read_arch(&mut r)?;
        arch.validate()?;
        let mode = QuantMode::from_code(r.u32()?)?;
        if !mode.is_bitwise() {
            return Err(Error::Container(format!("packed decoder cannot be {}", mode)));
        }
        let seed = r.u64()?;
        let perm = r.u64s()?.into_iter().map(|p| p as usize).collect();
        let interleaver = Interleaver::from_perm(perm, seed)?;
        if interleaver.len() != arch.block_len {
            return Err(Error::Container("interleaver length != block length".into()));
        }
        let mut stacks = Vec::with_capacity(2 * arch.iterations);
        for _ in 0..2 * arch.iterations {
            let spec = read_spec(&mut r)?;
            let input = InputLayer {
                spec,
                weight: r.f64s()?,
                bias: r.f64s()?,
                scale: r.f64s()?,
                shift: r.f64s()?,
            };
            if input.weight.len() != spec.weight_count()
                || [&input.bias, &input.scale, &input.shift].iter().any(|v| v.len() != spec.c_out)
            {
                return Err(Error::Container("packed input layer sizes do not match".into()));
            }
            let n_hidden = r.usize()?;
            let mut hidden = Vec::with_capacity(n_hidden.min(64));
            for _ in 0..n_hidden {
                let layer = read_layer(&mut r)?;
                let thresholds = r.i32s()?;
                if thresholds.len() != layer.spec().c_out {
                    return Err(Error::Container("threshold count != c_out".into()));
                }
                hidden.push(ThresholdLayer { layer, thresholds });
            }
            let output = read_layer(&mut r)?;
            let out_scale = r.f64s()?;
            let out_shift = r.f64s()?;
            if out_scale.len() != output.spec().c_out || out_shift.len() != output.spec().c_out {
                return Err(Error::Container("output affine size != c_out".into()));
            }
            stacks.push(PackedStack {
                input,
                hidden,
                output,
                out_scale,
                out_shift,
            });
        }
        r.expect_end()?;
        let mut it = stacks.into_iter();
        let blocks = (0..arch.iterations)
            .map(|_| [it.next().unwrap(), it.next().unwrap()])
            .collect();
        Ok(PackedDecoder {
            arch,
            mode,
            interleaver,
            blocks,
        })
    }
}

pub(crate) fn write_arch(w: &mut ByteWriter, a: &Architecture) {
    for v in [
        a.block_len,
        a.filters,
        a.kernel,
        a.iterations,
        a.features,
        a.enc_layers,
        a.dec_layers,
    ] {
        w.usize(v);
    }
}

pub(crate) fn read_arch(r: &mut ByteReader) -> Result<Architecture> {
    Ok(Architecture {
        block_len: r.usize()?,
        filters: r.usize()?,
        kernel: r.usize()?,
        iterations: r.usize()?,
        features: r.usize()?,
        enc_layers: r.usize()?,
        dec_layers: r.usize()?,
    })
}

pub(crate) fn write_spec(w: &mut ByteWriter, s: &ConvLayerSpec) {
    w.usize(s.c_in);
    w.usize(s.c_out);
    w.usize(s.kernel);
    w.u8(s.has_bias as u8);
    w.u8(match s.activation {
        Activation::Linear => 0,
        Activation::Elu => 1,
        Activation::SignBinary => 2,
        Activation::Sigmoid => 3,
    });
}

pub(crate) fn read_spec(r: &mut ByteReader) -> Result<ConvLayerSpec> {
    let (c_in, c_out, kernel) = (r.usize()?, r.usize()?, r.usize()?);
    let has_bias = r.u8()? != 0;
    let activation = match r.u8()? {
        0 => Activation::Linear,
        1 => Activation::Elu,
        2 => Activation::SignBinary,
        3 => Activation::Sigmoid,
        a => return Err(Error::Container(format!("unknown activation code {}", a))),
    };
    let spec = ConvLayerSpec {
        c_in,
        c_out,
        kernel,
        has_bias,
        activation,
    };
    spec.validate().map_err(|e| Error::Container(e.to_string()))?;
    Ok(spec)
}

fn write_layer(w: &mut ByteWriter, l: &PackedConvLayer) {
    write_spec(w, l.spec());
    w.u8(l.is_ternary() as u8);
    w.u64s(l.sign_words());
    w.u64s(l.mask_words());
    w.i32s(l.bias_code());
}

fn read_layer(r: &mut ByteReader) -> Result<PackedConvLayer> {
    let spec = read_spec(r)?;
    let ternary = r.u8()? != 0;
    let sign = r.u64s()?;
    let mask = r.u64s()?;
    let bias = r.i32s()?;
    PackedConvLayer::from_raw(spec, ternary, sign, mask, bias).map_err(|e| Error::Container(e.to_string()))
}
