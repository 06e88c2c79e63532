//! `BTAE` model container.
//!
//! Layout (little-endian): magic `BTAE`, version `u32 = 1`, section count
//! `u32`, then one table entry per section (4-byte tag, `u64` offset, `u64`
//! length, `u32` CRC32 of the payload), then the payloads.
//!
//! | tag    | payload                                                   |
//! |--------|-----------------------------------------------------------|
//! | `CONF` | experiment config text (optional)                         |
//! | `MODL` | architecture, mode, member count                          |
//! | `INTL` | interleaver seed and permutation                          |
//! | `ENCW` | encoder weights (f64) and frozen power statistics         |
//! | `DECW` | one per member: f64 weights, or q-bit codes + scale       |
//! | `PACK` | one per member when packed: bitplanes + thresholds        |
//! | `CURV` | training curve CSV (optional)                             |
//!
//! Readers skip tags they do not know and reject other versions.

use std::path::Path;

use crate::bytes::{ByteReader, ByteWriter};
use crate::codec::packed::{read_arch, read_spec, write_arch, write_spec};
use crate::codec::{BatchNorm, CodecModel, ConvStack, ConvUnit, Decoder, Encoder, Interleaver, PackedDecoder, PowerNorm};
use crate::config::{parse_config, ExperimentConfig};
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::quantize::{QuantMode, QuantizedTensor};
use crate::tensor::Tensor;
use crate::train::TrainLog;

pub const MAGIC: &[u8; 4] = b"BTAE";
pub const VERSION: u32 = 1;
const ENTRY_LEN: usize = 4 + 8 + 8 + 4;

/// Everything a model file carries.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub config: Option<ExperimentConfig>,
    /// One model per decoder; all share the encoder and interleaver.
    pub members: Vec<CodecModel>,
    /// Packed decoders, one per member, when the model was frozen for edge use.
    pub packed: Vec<PackedDecoder>,
    pub curve: Option<TrainLog>,
}

impl ModelContainer {
    pub fn single(model: CodecModel) -> Self {
        ModelContainer {
            config: None,
            members: vec![model],
            packed: Vec::new(),
            curve: None,
        }
    }

    pub fn from_ensemble(bag: &EnsembleModel) -> Self {
        ModelContainer {
            config: None,
            members: bag.members().to_vec(),
            packed: Vec::new(),
            curve: None,
        }
    }

    pub fn model(&self) -> &CodecModel {
        &self.members[0]
    }

    pub fn ensemble(&self) -> Result<EnsembleModel> {
        EnsembleModel::new(self.members.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let first = self
            .members
            .first()
            .ok_or_else(|| Error::Container("no model to write".into()))?;
        EnsembleModel::new(self.members.clone())?;
        if !self.packed.is_empty() && self.packed.len() != self.members.len() {
            return Err(Error::Container("packed decoders must match members one to one".into()));
        }
        let mut sections: Vec<(&[u8; 4], Vec<u8>)> = Vec::new();
        if let Some(c) = &self.config {
            sections.push((b"CONF", c.serialize().into_bytes()));
        }
        let mut w = ByteWriter::new();
        write_arch(&mut w, &first.arch);
        w.u32(first.mode.code());
        w.usize(self.members.len());
        sections.push((b"MODL", w.finish()));
        let mut w = ByteWriter::new();
        w.u64(first.interleaver.seed());
        w.u64s(&first.interleaver.perm().iter().map(|&p| p as u64).collect::<Vec<_>>());
        sections.push((b"INTL", w.finish()));
        sections.push((b"ENCW", encoder_bytes(&first.encoder)));
        for m in &self.members {
            sections.push((b"DECW", decoder_bytes(m)?));
        }
        for p in &self.packed {
            sections.push((b"PACK", p.to_bytes()));
        }
        if let Some(c) = &self.curve {
            sections.push((b"CURV", c.to_csv().into_bytes()));
        }
        Ok(assemble(&sections))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let sections = split(buf)?;
        let find_one = |tag: &[u8; 4]| -> Result<&[u8]> {
            sections
                .iter()
                .find(|(t, _)| t == tag)
                .map(|(_, p)| *p)
                .ok_or_else(|| Error::Container(format!("missing `{}` section", tag_name(tag))))
        };
        let config = match sections.iter().find(|(t, _)| t == b"CONF") {
            Some((_, p)) => {
                let text = std::str::from_utf8(p).map_err(|_| Error::Container("config is not UTF-8".into()))?;
                Some(parse_config(text)?)
            }
            None => None,
        };
        let mut r = ByteReader::new(find_one(b"MODL")?);
        let arch = read_arch(&mut r)?;
        arch.validate().map_err(|e| Error::Container(e.to_string()))?;
        let mode = QuantMode::from_code(r.u32()?)?;
        let n_members = r.usize()?;
        r.expect_end()?;

        let mut r = ByteReader::new(find_one(b"INTL")?);
        let seed = r.u64()?;
        let perm = r.u64s()?.into_iter().map(|p| p as usize).collect();
        r.expect_end()?;
        let interleaver = Interleaver::from_perm(perm, seed)?;

        let encoder = read_encoder(find_one(b"ENCW")?)?;
        let decws: Vec<&[u8]> = sections.iter().filter(|(t, _)| t == b"DECW").map(|(_, p)| *p).collect();
        if decws.len() != n_members || n_members == 0 {
            return Err(Error::Container(format!(
                "expected {} decoder sections, found {}",
                n_members,
                decws.len()
            )));
        }
        let members = decws
            .iter()
            .map(|p| {
                let model = CodecModel {
                    arch,
                    mode,
                    interleaver: interleaver.clone(),
                    encoder: encoder.clone(),
                    decoder: read_decoder(p, mode)?,
                };
                model.validate().map_err(|e| Error::Container(e.to_string()))?;
                Ok(model)
            })
            .collect::<Result<Vec<_>>>()?;
        let packed = sections
            .iter()
            .filter(|(t, _)| t == b"PACK")
            .map(|(_, p)| PackedDecoder::from_bytes(p))
            .collect::<Result<Vec<_>>>()?;
        if !packed.is_empty() && packed.len() != members.len() {
            return Err(Error::Container("packed sections do not match members".into()));
        }
        let curve = match sections.iter().find(|(t, _)| t == b"CURV") {
            Some((_, p)) => {
                let text = std::str::from_utf8(p).map_err(|_| Error::Container("curve is not UTF-8".into()))?;
                Some(TrainLog::parse_csv(text)?)
            }
            None => None,
        };
        Ok(ModelContainer {
            config,
            members,
            packed,
            curve,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelContainer::from_bytes(&std::fs::read(path)?)
    }
}

fn tag_name(tag: &[u8]) -> String {
    String::from_utf8_lossy(tag).into_owned()
}

/// Serializes tagged payloads with the header and section table.
pub fn assemble(sections: &[(&[u8; 4], Vec<u8>)]) -> Vec<u8> {
    let mut offset = (4 + 4 + 4 + ENTRY_LEN * sections.len()) as u64;
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(sections.len() as u32);
    for (tag, payload) in sections {
        w.bytes(*tag);
        w.u64(offset);
        w.u64(payload.len() as u64);
        w.u32(crc32fast::hash(payload));
        offset += payload.len() as u64;
    }
    for (_, payload) in sections {
        w.bytes(payload);
    }
    w.finish()
}

/// Splits a container into verified `(tag, payload)` pairs in table order.
pub fn split(buf: &[u8]) -> Result<Vec<([u8; 4], &[u8])>> {
    let mut r = ByteReader::new(buf);
    if r.take(4).map_err(|_| Error::Container("file too short".into()))? != MAGIC {
        return Err(Error::Container("bad magic (not a BTAE file)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {}", version)));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        let crc = r.u32()?;
        let end = offset
            .checked_add(len)
            .filter(|&e| e <= buf.len())
            .ok_or_else(|| Error::Container(format!("section `{}` runs past end of file", tag_name(&tag))))?;
        let payload = &buf[offset..end];
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checksum {
                section: tag_name(&tag),
            });
        }
        out.push((tag, payload));
    }
    Ok(out)
}

fn write_norm(w: &mut ByteWriter, norm: &Option<BatchNorm>) {
    match norm {
        None => w.u8(0),
        Some(bn) => {
            w.u8(1);
            w.f64s(bn.gamma.data());
            w.f64s(bn.beta.data());
            w.f64s(&bn.running_mean);
            w.f64s(&bn.running_var);
        }
    }
}

fn read_norm(r: &mut ByteReader, channels: usize) -> Result<Option<BatchNorm>> {
    if r.u8()? == 0 {
        return Ok(None);
    }
    let bn = BatchNorm {
        gamma: Tensor::vector(r.f64s()?),
        beta: Tensor::vector(r.f64s()?),
        running_mean: r.f64s()?,
        running_var: r.f64s()?,
    };
    if [bn.gamma.len(), bn.beta.len(), bn.running_mean.len(), bn.running_var.len()]
        .iter()
        .any(|&l| l != channels)
    {
        return Err(Error::Container("batch-norm size != channels".into()));
    }
    Ok(Some(bn))
}

fn write_stack(w: &mut ByteWriter, s: &ConvStack, with_weights: bool) {
    w.usize(s.units.len());
    for u in &s.units {
        write_spec(w, &u.spec);
        if with_weights {
            w.f64s(u.weight.data());
            w.f64s(u.bias.data());
        }
        write_norm(w, &u.norm);
    }
}

fn read_stack(r: &mut ByteReader) -> Result<ConvStack> {
    let n = r.usize()?;
    let mut units = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let spec = read_spec(r)?;
        let weight = Tensor::new(spec.weight_shape().to_vec(), r.f64s()?)
            .map_err(|_| Error::Container("weight count does not match layer".into()))?;
        let bias = Tensor::vector(r.f64s()?);
        if bias.len() != spec.c_out {
            return Err(Error::Container("bias count does not match layer".into()));
        }
        let norm = read_norm(r, spec.c_out)?;
        units.push(ConvUnit {
            spec,
            weight,
            bias,
            norm,
        });
    }
    Ok(ConvStack { units })
}

fn encoder_bytes(e: &Encoder) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.usize(e.streams.len());
    for s in &e.streams {
        write_stack(&mut w, s, true);
    }
    w.f64s(&e.power.mean);
    w.f64s(&e.power.var);
    w.finish()
}

fn read_encoder(buf: &[u8]) -> Result<Encoder> {
    let mut r = ByteReader::new(buf);
    let n = r.usize()?;
    let streams = (0..n).map(|_| read_stack(&mut r)).collect::<Result<Vec<_>>>()?;
    let power = PowerNorm {
        mean: r.f64s()?,
        var: r.f64s()?,
    };
    r.expect_end()?;
    if power.mean.len() != crate::codec::STREAMS || power.var.len() != crate::codec::STREAMS {
        return Err(Error::Container("power statistics need one entry per stream".into()));
    }
    Ok(Encoder { streams, power })
}

fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        for b in 0..bits as usize {
            if c >> b & 1 == 1 {
                let pos = i * bits as usize + b;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    out
}

fn unpack_codes(bytes: &[u8], bits: u8, n: usize) -> Result<Vec<u8>> {
    if bytes.len() != (n * bits as usize).div_ceil(8) {
        return Err(Error::Container("code block has the wrong size".into()));
    }
    Ok((0..n)
        .map(|i| {
            (0..bits as usize).fold(0u8, |acc, b| {
                let pos = i * bits as usize + b;
                acc | ((bytes[pos / 8] >> (pos % 8) & 1) << b)
            })
        })
        .collect())
}

fn write_quantized(w: &mut ByteWriter, q: &QuantizedTensor) {
    w.f64(q.scale);
    let packed = pack_codes(&q.codes, q.bits);
    w.usize(packed.len());
    w.bytes(&packed);
}

fn decoder_bytes(m: &CodecModel) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    let quantized = matches!(m.mode, QuantMode::PostQuant(_));
    w.usize(m.decoder.blocks.len());
    if quantized {
        let codes = m
            .decoder
            .codes
            .as_ref()
            .ok_or_else(|| Error::Container("post-quantized decoder lost its codes".into()))?;
        let mut it = codes.iter();
        for s in m.decoder.stacks() {
            write_stack(&mut w, s, false);
            for _ in &s.units {
                for _ in 0..2 {
                    let q = it
                        .next()
                        .ok_or_else(|| Error::Container("too few quantized tensors".into()))?;
                    write_quantized(&mut w, q);
                }
            }
        }
    } else {
        for s in m.decoder.stacks() {
            write_stack(&mut w, s, true);
        }
    }
    Ok(w.finish())
}

fn read_decoder(buf: &[u8], mode: QuantMode) -> Result<Decoder> {
    let mut r = ByteReader::new(buf);
    let n_blocks = r.usize()?;
    let mut stacks = Vec::with_capacity(2 * n_blocks.min(64));
    let mut codes = Vec::new();
    for _ in 0..2 * n_blocks {
        match mode {
            QuantMode::PostQuant(bits) => {
                let (stack, c) = read_quantized_stack(&mut r, bits)?;
                stacks.push(stack);
                codes.extend(c);
            }
            _ => stacks.push(read_stack(&mut r)?),
        }
    }
    r.expect_end()?;
    let codes = matches!(mode, QuantMode::PostQuant(_)).then_some(codes);
    let mut it = stacks.into_iter();
    let blocks = (0..n_blocks)
        .map(|_| [it.next().unwrap(), it.next().unwrap()])
        .collect();
    Ok(Decoder { blocks, codes })
}

/// Post-quantized stack: specs and norms first, then each unit's weight
/// and bias codes.
fn read_quantized_stack(r: &mut ByteReader, bits: u8) -> Result<(ConvStack, Vec<QuantizedTensor>)> {
    let n = r.usize()?;
    let mut specs = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let spec = read_spec(r)?;
        let norm = read_norm(r, spec.c_out)?;
        specs.push((spec, norm));
    }
    let mut units = Vec::with_capacity(n);
    let mut codes = Vec::with_capacity(2 * n);
    for (spec, norm) in specs {
        let mut read_q = |shape: Vec<usize>| -> Result<QuantizedTensor> {
            let scale = r.f64()?;
            let len = r.usize()?;
            let count = shape.iter().product();
            let c = unpack_codes(r.take(len)?, bits, count)?;
            if c.iter().any(|&v| u32::from(v) >= 1u32 << bits) {
                return Err(Error::Container("code out of range".into()));
            }
            Ok(QuantizedTensor {
                bits,
                scale,
                shape,
                codes: c,
            })
        };
        let wq = read_q(spec.weight_shape().to_vec())?;
        let bq = read_q(vec![spec.c_out])?;
        units.push(ConvUnit {
            spec,
            weight: wq.decode(),
            bias: bq.decode(),
            norm,
        });
        codes.push(wq);
        codes.push(bq);
    }
    Ok((ConvStack { units }, codes))
}
