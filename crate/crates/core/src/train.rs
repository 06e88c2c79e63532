//! Alternating encoder/decoder training with BCE, Adam, plateau decay, and
//! quantization-aware decoder updates.
//!
//! Each epoch runs `enc_steps` encoder-phase steps (decoder frozen, fixed
//! SNR) and then `dec_steps` decoder-phase steps (encoder frozen, per-sample
//! SNR drawn uniformly from a range), followed by a validation pass over
//! fixed seeded batches that drives the plateau scheduler. The module not
//! being trained runs in inference mode and its statistics stay untouched.

use std::fmt;
use std::io::Write;

use log::{debug, info};

use crate::autodiff::{Tape, Var};
use crate::channel::{snr_db_to_sigma2, NoiseStream};
use crate::codec::{apply_moments, Architecture, CodecModel, StackTrace};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::quantize::{clip_unit, QuantMode};
use crate::tensor::Tensor;

const TAG_ENC_STEP: u64 = 0x11;
const TAG_DEC_STEP: u64 = 0x12;
const TAG_VALIDATION: u64 = 0x13;
const TAG_CALIBRATION: u64 = 0x14;
const CALIBRATION_BATCHES: usize = 20;

/// Counter-based stream id: an 8-bit tag plus two 24-bit counters.
pub fn stream_id(tag: u64, a: u64, b: u64) -> u64 {
    tag << 48 | (a & 0xff_ffff) << 24 | (b & 0xff_ffff)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Encoder,
    Decoder,
    Validation,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Encoder => "encoder",
            Phase::Decoder => "decoder",
            Phase::Validation => "validation",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Minimum absolute validation-loss improvement that resets patience.
    pub plateau_threshold: f64,
    pub enc_steps: usize,
    pub dec_steps: usize,
    pub enc_snr_db: f64,
    pub dec_snr_lo: f64,
    pub dec_snr_hi: f64,
    pub val_batches: usize,
    pub val_snr_db: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::paper()
    }
}

impl TrainConfig {
    /// Full-length schedule: batch 500, lr 1e-4, 800 epochs.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 500,
            epochs: 800,
            lr0: 1e-4,
            plateau_patience: 50,
            plateau_factor: 0.1,
            plateau_threshold: 1e-4,
            enc_steps: 100,
            dec_steps: 500,
            enc_snr_db: 1.0,
            dec_snr_lo: -1.5,
            dec_snr_hi: 2.0,
            val_batches: 10,
            val_snr_db: 1.0,
            seed: 0,
        }
    }

    /// Laptop-scale schedule: 40 short epochs with the same 1:5
    /// encoder/decoder step ratio.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 100,
            epochs: 40,
            lr0: 1e-3,
            plateau_patience: 10,
            enc_steps: 4,
            dec_steps: 20,
            val_batches: 10,
            ..TrainConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = |key, ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Validation { key, msg }) };
        v("batch_size", self.batch_size >= 1, "must be >= 1".into())?;
        v("lr", self.lr0 > 0.0 && self.lr0.is_finite(), format!("must be positive, got {}", self.lr0))?;
        v(
            "plateau_factor",
            self.plateau_factor > 0.0 && self.plateau_factor < 1.0,
            format!("must be in (0, 1), got {}", self.plateau_factor),
        )?;
        v("plateau_patience", self.plateau_patience >= 1, "must be >= 1".into())?;
        v(
            "plateau_threshold",
            self.plateau_threshold >= 0.0,
            "must be non-negative".into(),
        )?;
        v(
            "dec_snr_hi",
            self.dec_snr_hi >= self.dec_snr_lo,
            "must be >= dec_snr_lo".into(),
        )?;
        v("val_batches", self.val_batches >= 1, "must be >= 1".into())?;
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauScheduler {
            lr: cfg.lr0,
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            threshold: cfg.plateau_threshold,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
                debug!("plateau: lr -> {:e}", self.lr);
            }
        }
        self.lr
    }
}

/// Learning rate after replaying a whole validation history.
pub fn plateau_scheduler(history: &[f64], cfg: &TrainConfig) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("plateau_scheduler needs a nonempty history".into()));
    }
    let mut s = PlateauScheduler::new(cfg);
    Ok(history.iter().fold(cfg.lr0, |_, &l| s.observe(l)))
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, epoch: usize, phase: Phase, loss: f64, lr: f64) {
        self.rows.push(LogRow { epoch, phase, loss, lr });
    }

    /// `epoch,phase,loss,lr` CSV.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,phase,loss,lr")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:e},{:e}", r.epoch, r.phase, r.loss, r.lr)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("epoch,phase,loss,lr") {
            return Err(Error::Container("training log header missing".into()));
        }
        let mut log = TrainLog::default();
        for (i, line) in lines.enumerate() {
            let bad = || Error::Container(format!("training log line {} malformed", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let phase = match f[1] {
                "encoder" => Phase::Encoder,
                "decoder" => Phase::Decoder,
                "validation" => Phase::Validation,
                _ => return Err(bad()),
            };
            log.push(
                f[0].parse().map_err(|_| bad())?,
                phase,
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
            );
        }
        Ok(log)
    }

    /// Validation losses in epoch order.
    pub fn validation_losses(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.phase == Phase::Validation)
            .map(|r| r.loss)
            .collect()
    }
}

/// Messages, per-sample noise, and BCE targets for one batch.
struct Batch {
    u: Tensor,
    noise: Tensor,
    target: Tensor,
}

fn draw_batch(seed: u64, stream: u64, b: usize, k: usize, snr: impl Fn(&mut NoiseStream) -> f64) -> Result<Batch> {
    let mut rng = NoiseStream::new(seed, stream);
    let mut bits = vec![0.0; b * k];
    rng.fill_bits(&mut bits);
    let sigmas: Vec<f64> = (0..b).map(|_| snr_db_to_sigma2(snr(&mut rng)).sqrt()).collect();
    let n = crate::codec::STREAMS * k;
    let mut noise = vec![0.0; b * n];
    rng.fill_normal(&mut noise);
    for (chunk, s) in noise.chunks_mut(n).zip(&sigmas) {
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    let target = bits.iter().map(|&v| (v + 1.0) / 2.0).collect();
    Ok(Batch {
        u: Tensor::new(vec![b, 1, k], bits)?,
        noise: Tensor::new(vec![b, crate::codec::STREAMS, k], noise)?,
        target: Tensor::new(vec![b, 1, k], target)?,
    })
}

/// Forward pass of one batch: returns the tape, loss, and the traces needed
/// for gradients and statistics updates.
struct Step {
    tape: Tape,
    loss: Var,
    enc_stacks: Vec<StackTrace>,
    dec_stacks: Vec<StackTrace>,
    power: Option<Var>,
}

fn forward(model: &CodecModel, batch: &Batch, phase: Phase) -> Result<Step> {
    let mut tape = Tape::new();
    let u = tape.constant(batch.u.clone());
    let enc_train = phase == Phase::Encoder;
    let dec_train = phase == Phase::Decoder;
    let (x, enc_trace) = if phase == Phase::Validation {
        model.record_encoder(&mut tape, u, false, false)?
    } else {
        model.record_encoder_train(&mut tape, u, enc_train)?
    };
    let z = tape.add_const(x, &batch.noise)?;
    let (soft, dec_trace) = model.record_decoder(&mut tape, z, dec_train, dec_train)?;
    let loss = tape.bce_loss(soft, &batch.target)?;
    Ok(Step {
        tape,
        loss,
        enc_stacks: enc_trace.stacks,
        dec_stacks: dec_trace.stacks,
        power: enc_trace.power,
    })
}

/// Optimizer state for both modules and the shared schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: CodecModel,
    pub cfg: TrainConfig,
    pub log: TrainLog,
    enc_opt: Adam,
    dec_opt: Adam,
    scheduler: PlateauScheduler,
    epoch: usize,
}

fn sizes<'a>(stacks: impl Iterator<Item = &'a crate::codec::ConvStack>) -> Vec<usize> {
    stacks.flat_map(|s| s.params()).map(Tensor::len).collect()
}

impl Trainer {
    pub fn new(model: CodecModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if matches!(model.mode, QuantMode::PostQuant(_)) {
            return Err(Error::InvalidArgument("post-quantized models are not trainable".into()));
        }
        let enc_opt = Adam::new(cfg.lr0, &sizes(model.encoder.stacks()))?;
        let dec_opt = Adam::new(cfg.lr0, &sizes(model.decoder.stacks()))?;
        Ok(Trainer {
            scheduler: PlateauScheduler::new(&cfg),
            model,
            cfg,
            log: TrainLog::default(),
            enc_opt,
            dec_opt,
            epoch: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.scheduler.lr()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn step(&mut self, phase: Phase, index: usize) -> Result<f64> {
        let k = self.model.arch.block_len;
        let b = self.cfg.batch_size;
        let batch = match phase {
            Phase::Encoder => {
                let snr = self.cfg.enc_snr_db;
                draw_batch(self.cfg.seed, stream_id(TAG_ENC_STEP, self.epoch as u64, index as u64), b, k, |_| snr)?
            }
            Phase::Decoder => {
                let (lo, hi) = (self.cfg.dec_snr_lo, self.cfg.dec_snr_hi);
                draw_batch(
                    self.cfg.seed,
                    stream_id(TAG_DEC_STEP, self.epoch as u64, index as u64),
                    b,
                    k,
                    |rng| lo + (hi - lo) * rng.uniform(),
                )?
            }
            Phase::Validation => unreachable!("validation does not step"),
        };
        let diverged = |loss: f64| Error::Diverged {
            epoch: self.epoch,
            phase: phase.name(),
            loss,
        };
        let mut step = forward(&self.model, &batch, phase).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(f64::NAN),
            e => e,
        })?;
        let loss = step.tape.value(step.loss).data()[0];
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        step.tape.backward(step.loss)?;
        let lr = self.scheduler.lr();
        match phase {
            Phase::Encoder => {
                let vars: Vec<Var> = step.enc_stacks.iter().flat_map(|t| t.params.iter().copied()).collect();
                let grads = collect_grads(&step.tape, &vars)?;
                let mut params: Vec<&mut Tensor> = self.model.encoder.stacks_mut().flat_map(|s| s.params_mut()).collect();
                self.enc_opt.set_lr(lr)?;
                self.enc_opt.step(&mut params, &grads.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
                for (stack, trace) in self.model.encoder.stacks_mut().zip(&step.enc_stacks) {
                    apply_moments(&step.tape, stack, trace);
                }
                if let Some(p) = step.power {
                    let (mean, var) = step.tape.moments(p).expect("standardize node");
                    self.model.encoder.power.update(mean, var);
                }
            }
            Phase::Decoder => {
                let vars: Vec<Var> = step.dec_stacks.iter().flat_map(|t| t.params.iter().copied()).collect();
                let grads = collect_grads(&step.tape, &vars)?;
                let bitwise = self.model.mode.is_bitwise();
                let mut flags = Vec::new();
                for s in self.model.decoder.stacks() {
                    flags.extend(s.quantized_flags());
                }
                let mut params: Vec<&mut Tensor> = self.model.decoder.stacks_mut().flat_map(|s| s.params_mut()).collect();
                self.dec_opt.set_lr(lr)?;
                self.dec_opt.step(&mut params, &grads.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
                if bitwise {
                    for (p, q) in params.iter_mut().zip(&flags) {
                        if *q {
                            clip_unit(p);
                        }
                    }
                }
                for (stack, trace) in self.model.decoder.stacks_mut().zip(&step.dec_stacks) {
                    apply_moments(&step.tape, stack, trace);
                }
            }
            Phase::Validation => unreachable!(),
        }
        Ok(loss)
    }

    /// Runs one phase of the current epoch and returns its mean loss.
    pub fn train_epoch(&mut self, phase: Phase) -> Result<f64> {
        let steps = match phase {
            Phase::Encoder => self.cfg.enc_steps,
            Phase::Decoder => self.cfg.dec_steps,
            Phase::Validation => return self.validation_loss(),
        };
        let mut total = 0.0;
        for i in 0..steps {
            total += self.step(phase, i)?;
        }
        Ok(if steps == 0 { f64::NAN } else { total / steps as f64 })
    }

    /// Mean inference-mode loss over the fixed validation batches.
    pub fn validation_loss(&self) -> Result<f64> {
        validation_loss(&self.model, &self.cfg)
    }

    /// One full epoch: encoder phase, decoder phase, validation, schedule.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let lr = self.scheduler.lr();
        if self.cfg.enc_steps > 0 {
            let l = self.train_epoch(Phase::Encoder)?;
            self.log.push(self.epoch, Phase::Encoder, l, lr);
        }
        if self.cfg.dec_steps > 0 {
            let l = self.train_epoch(Phase::Decoder)?;
            self.log.push(self.epoch, Phase::Decoder, l, lr);
        }
        let val = self.validation_loss()?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                phase: Phase::Validation.name(),
                loss: val,
            });
        }
        self.log.push(self.epoch, Phase::Validation, val, lr);
        self.scheduler.observe(val);
        info!("epoch {} val loss {:.5} lr {:e}", self.epoch, val, lr);
        self.epoch += 1;
        Ok(val)
    }

    /// Runs the remaining epochs, then freezes power statistics.
    pub fn run(mut self) -> Result<(CodecModel, TrainLog)> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        if self.cfg.enc_steps > 0 {
            self.model.calibrate_power(
                CALIBRATION_BATCHES,
                self.cfg.batch_size,
                self.cfg.seed,
                stream_id(TAG_CALIBRATION, 0, 0),
            )?;
        }
        Ok((self.model, self.log))
    }
}

fn collect_grads(tape: &Tape, vars: &[Var]) -> Result<Vec<Vec<f64>>> {
    vars.iter()
        .map(|&v| {
            Ok(tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        })
        .collect()
}

pub fn validation_loss(model: &CodecModel, cfg: &TrainConfig) -> Result<f64> {
    let k = model.arch.block_len;
    let mut total = 0.0;
    for i in 0..cfg.val_batches {
        let snr = cfg.val_snr_db;
        let batch = draw_batch(cfg.seed, stream_id(TAG_VALIDATION, 0, i as u64), cfg.batch_size, k, |_| snr)?;
        let step = forward(model, &batch, Phase::Validation)?;
        total += step.tape.value(step.loss).data()[0];
    }
    Ok(total / cfg.val_batches as f64)
}

/// Trains a fresh model of the given mode from scratch.
pub fn train_full(arch: Architecture, cfg: &TrainConfig, mode: QuantMode) -> Result<(CodecModel, TrainLog)> {
    let model = CodecModel::new(arch, mode, cfg.seed)?;
    Trainer::new(model, cfg.clone())?.run()
}

/// Trains only a new decoder of `mode` against the frozen encoder and
/// interleaver of `base`; the decoder initialisation uses `cfg.seed`.
pub fn train_decoder(base: &CodecModel, cfg: &TrainConfig, mode: QuantMode) -> Result<(CodecModel, TrainLog)> {
    let mut model = CodecModel::new(base.arch, mode, cfg.seed)?;
    model.encoder = base.encoder.clone();
    model.interleaver = base.interleaver.clone();
    let cfg = TrainConfig {
        enc_steps: 0,
        ..cfg.clone()
    };
    Trainer::new(model, cfg)?.run()
}
