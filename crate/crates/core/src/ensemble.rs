//! Bagging of independently trained weak decoders behind one encoder.

use crate::codec::{CodecModel, Decoded};
use crate::error::{Error, Result};
use crate::parallel;
use crate::quantize::QuantMode;
use crate::tensor::Tensor;
use crate::train::{train_decoder, train_full, TrainConfig, TrainLog};
use crate::codec::Architecture;

/// Default bag size.
pub const DEFAULT_MEMBERS: usize = 4;

/// B decoders sharing one encoder and interleaver.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    members: Vec<CodecModel>,
}

impl EnsembleModel {
    /// Checks that all members agree on everything but decoder weights.
    pub fn new(members: Vec<CodecModel>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("an ensemble needs at least one member".into()))?;
        for (i, m) in members.iter().enumerate().skip(1) {
            let why = if m.arch != first.arch {
                Some("architecture (K/M/F/filters)")
            } else if m.mode != first.mode {
                Some("mode")
            } else if m.interleaver != first.interleaver {
                Some("interleaver")
            } else if m.encoder != first.encoder {
                Some("encoder weights")
            } else {
                None
            };
            if let Some(what) = why {
                return Err(Error::InvalidArgument(format!(
                    "ensemble member {} differs from member 0 in {}",
                    i, what
                )));
            }
        }
        for m in &members {
            m.validate()?;
        }
        Ok(EnsembleModel { members })
    }

    pub fn members(&self) -> &[CodecModel] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn mode(&self) -> QuantMode {
        self.members[0].mode
    }

    /// The shared encoder side (member 0).
    pub fn encoder_model(&self) -> &CodecModel {
        &self.members[0]
    }

    pub fn encode(&self, u: &Tensor) -> Result<Tensor> {
        self.members[0].encode(u)
    }

    /// Averages the members' soft outputs; hard decisions threshold at 0.5.
    pub fn decode(&self, z: &Tensor) -> Result<Decoded> {
        let softs = parallel::map_indexed(self.members.len(), |i| self.members[i].decode(z).map(|d| d.soft));
        let softs = softs.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Decoded::from_soft(average(&softs)?))
    }
}

/// Element-wise mean with a fixed pairwise summation order over member
/// index. The result is clamped to the members' range, which keeps the mean
/// of identical members exactly equal to them.
pub fn average(softs: &[Tensor]) -> Result<Tensor> {
    let first = softs
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    if softs.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::shape("bag average", "member outputs differ in shape"));
    }
    let b = softs.len() as f64;
    let mut column = vec![0.0; softs.len()];
    let data = (0..first.len())
        .map(|j| {
            for (c, s) in column.iter_mut().zip(softs) {
                *c = s.data()[j];
            }
            let (lo, hi) = column
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            (pairwise_sum(&column) / b).clamp(lo, hi)
        })
        .collect();
    Tensor::new(first.shape().to_vec(), data)
}

fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Decoder seed of member `b` derived from the base seed.
pub fn member_seed(seed: u64, b: usize) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(b as u64 + 1))
}

/// Trains `members` decoders of `mode` against the frozen encoder of `base`.
pub fn train_bag_on(base: &CodecModel, cfg: &TrainConfig, mode: QuantMode, members: usize) -> Result<(EnsembleModel, Vec<TrainLog>)> {
    if members == 0 {
        return Err(Error::Validation {
            key: "members",
            msg: "bag size must be >= 1".into(),
        });
    }
    let runs = parallel::map_indexed(members, |b| {
        let cfg = TrainConfig {
            seed: member_seed(cfg.seed, b),
            ..cfg.clone()
        };
        train_decoder(base, &cfg, mode)
    });
    let mut models = Vec::with_capacity(members);
    let mut logs = Vec::with_capacity(members);
    for r in runs {
        let (m, l) = r?;
        models.push(m);
        logs.push(l);
    }
    Ok((EnsembleModel::new(models)?, logs))
}

/// Trains a real model for the shared encoder, then a bag of decoders.
pub fn train_bag(arch: Architecture, cfg: &TrainConfig, mode: QuantMode, members: usize) -> Result<(EnsembleModel, Vec<TrainLog>)> {
    let (base, _) = train_full(arch, cfg, QuantMode::Real)?;
    train_bag_on(&base, cfg, mode, members)
}
