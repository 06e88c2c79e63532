use crate::autodiff::{Activation, ConvLayerSpec, Tape, Var};
use crate::channel::NoiseStream;
use crate::error::{Error, Result};
use crate::quantize::{QuantMode, QuantizedTensor};
use crate::tensor::Tensor;

use super::Interleaver;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Floor added to the codeword variance before power normalization.
pub const POWER_EPS: f64 = 1e-10;
/// Initial scale of the final logit normalization, so an untrained decoder
/// outputs probabilities near 0.5.
const LOGIT_GAMMA_INIT: f64 = 0.1;
const INIT_STREAM: u64 = 0x1417_0000_0000_0000;

/// Encoder streams: rate 1/3.
pub const STREAMS: usize = 3;

/// Network widths and depths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    /// Message bits per block (K).
    pub block_len: usize,
    pub filters: usize,
    pub kernel: usize,
    /// Decoder iterations (M).
    pub iterations: usize,
    /// Prior/posterior feature channels exchanged between decoders (F).
    pub features: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

impl Architecture {
    /// Reduced-width profile for laptop-scale runs.
    pub fn desk() -> Self {
        Architecture {
            block_len: 100,
            filters: 16,
            kernel: 5,
            iterations: 2,
            features: 5,
            enc_layers: 2,
            dec_layers: 5,
        }
    }

    /// Full-size profile: 100 filters, 6 iterations.
    pub fn paper() -> Self {
        Architecture {
            filters: 100,
            iterations: 6,
            ..Architecture::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("block_len", self.block_len),
            ("filters", self.filters),
            ("iterations", self.iterations),
            ("features", self.features),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{} must be >= 1", name)));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.dec_layers < 2 {
            return Err(Error::InvalidArgument("decoder blocks need at least 2 layers".into()));
        }
        Ok(())
    }

    /// Encoder stack: `enc_layers` convolutions then a 1×1 head to one stream.
    pub fn encoder_specs(&self) -> Vec<ConvLayerSpec> {
        let mut specs = Vec::with_capacity(self.enc_layers + 1);
        let mut c_in = 1;
        for _ in 0..self.enc_layers {
            specs.push(spec(c_in, self.filters, self.kernel, Activation::Elu));
            c_in = self.filters;
        }
        specs.push(spec(c_in, 1, 1, Activation::Linear));
        specs
    }

    /// One decoder block; input is `2 + F` channels, output `F` (or 1 for
    /// the very last block).
    pub fn decoder_specs(&self, mode: QuantMode, final_block: bool) -> Vec<ConvLayerSpec> {
        let hidden = if mode.is_bitwise() {
            Activation::SignBinary
        } else {
            Activation::Elu
        };
        let out = if final_block { 1 } else { self.features };
        let mut specs = Vec::with_capacity(self.dec_layers);
        let mut c_in = 2 + self.features;
        for _ in 0..self.dec_layers - 1 {
            specs.push(spec(c_in, self.filters, self.kernel, hidden));
            c_in = self.filters;
        }
        specs.push(spec(c_in, out, self.kernel, Activation::Linear));
        specs
    }
}

fn spec(c_in: usize, c_out: usize, kernel: usize, activation: Activation) -> ConvLayerSpec {
    ConvLayerSpec {
        c_in,
        c_out,
        kernel,
        has_bias: true,
        activation,
    }
}

/// Batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Inference-mode `(scale, shift)` so that `y = x · scale + shift`.
    pub fn eval_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .data()
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + BN_EPS).sqrt())
            .collect();
        let shift = self
            .beta
            .data()
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }

    /// Momentum update from batch moments (biased variance over `n` samples).
    pub fn update(&mut self, mean: &[f64], var: &[f64], n: usize) {
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c] * unbias;
        }
    }
}

/// One convolution with bias, optional batch norm, and its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub spec: ConvLayerSpec,
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: Option<BatchNorm>,
}

/// A learnable block: a chain of convolution units.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub units: Vec<ConvUnit>,
}

impl ConvStack {
    fn init(specs: &[ConvLayerSpec], normed: impl Fn(usize) -> bool, rng: &mut NoiseStream) -> Self {
        let units = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let bound = 1.0 / ((s.c_in * s.kernel) as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect()
                };
                ConvUnit {
                    spec: *s,
                    weight: Tensor::new(s.weight_shape().to_vec(), draw(s.weight_count())).unwrap(),
                    bias: Tensor::vector(draw(s.c_out)),
                    norm: normed(i).then(|| BatchNorm::new(s.c_out)),
                }
            })
            .collect();
        ConvStack { units }
    }

    /// Weights and biases (batch-norm affine terms are not counted).
    pub fn weight_count(&self) -> usize {
        self.units
            .iter()
            .map(|u| u.weight.len() + u.bias.len())
            .sum()
    }

    /// Parameters in canonical order: per unit weight, bias, gamma, beta.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for u in &self.units {
            out.push(&u.weight);
            out.push(&u.bias);
            if let Some(bn) = &u.norm {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for u in &mut self.units {
            out.push(&mut u.weight);
            out.push(&mut u.bias);
            if let Some(bn) = &mut u.norm {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Marks which entries of [`ConvStack::params`] are quantized weights/biases.
    pub fn quantized_flags(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for u in &self.units {
            out.extend([true, true]);
            if u.norm.is_some() {
                out.extend([false, false]);
            }
        }
        out
    }
}

/// Frozen per-stream codeword statistics used at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl PowerNorm {
    fn new() -> Self {
        PowerNorm {
            mean: vec![0.0; STREAMS],
            var: vec![1.0; STREAMS],
        }
    }

    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self.var.iter().map(|v| 1.0 / (v + POWER_EPS).sqrt()).collect();
        let shift = self.mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
        (scale, shift)
    }

    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        for c in 0..STREAMS {
            self.mean[c] = (1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * mean[c];
            self.var[c] = (1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * var[c];
        }
    }
}

/// Three learnable encoding blocks; the third sees the interleaved message.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub streams: Vec<ConvStack>,
    pub power: PowerNorm,
}

impl Encoder {
    pub fn weight_count(&self) -> usize {
        self.streams.iter().map(ConvStack::weight_count).sum()
    }

    pub fn stacks(&self) -> impl Iterator<Item = &ConvStack> {
        self.streams.iter()
    }

    pub fn stacks_mut(&mut self) -> impl Iterator<Item = &mut ConvStack> {
        self.streams.iter_mut()
    }
}

/// `M` iterations of two decoding blocks each.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub blocks: Vec<[ConvStack; 2]>,
    /// q-bit codes of every weight and bias, in stack order, for
    /// post-quantized decoders.
    pub codes: Option<Vec<QuantizedTensor>>,
}

impl Decoder {
    pub fn weight_count(&self) -> usize {
        self.stacks().map(ConvStack::weight_count).sum()
    }

    pub fn stacks(&self) -> impl Iterator<Item = &ConvStack> {
        self.blocks.iter().flat_map(|b| b.iter())
    }

    pub fn stacks_mut(&mut self) -> impl Iterator<Item = &mut ConvStack> {
        self.blocks.iter_mut().flat_map(|b| b.iter_mut())
    }

    pub fn units(&self) -> impl Iterator<Item = &ConvUnit> {
        self.stacks().flat_map(|s| s.units.iter())
    }
}

/// Soft and hard decisions for a batch of blocks, both `[b, 1, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub soft: Tensor,
    pub hard: Tensor,
}

impl Decoded {
    /// `+1` iff `soft ≥ 0.5`.
    pub fn from_soft(soft: Tensor) -> Self {
        let hard = soft.map(|p| if p >= 0.5 { 1.0 } else { -1.0 });
        Decoded { soft, hard }
    }
}

/// Interleaved rate-1/3 CNN encoder plus iterative CNN decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecModel {
    pub arch: Architecture,
    pub mode: QuantMode,
    pub interleaver: Interleaver,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Tape handles produced while recording one stack.
#[derive(Debug, Default)]
pub(crate) struct StackTrace {
    pub params: Vec<Var>,
    pub moments: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct RecordOpts {
    pub quant: QuantMode,
    pub training: bool,
    pub trainable: bool,
}

pub(crate) fn record_stack(tape: &mut Tape, stack: &ConvStack, mut x: Var, opts: RecordOpts) -> Result<(Var, StackTrace)> {
    let mut trace = StackTrace::default();
    let leaf = |tape: &mut Tape, t: &Tensor| {
        if opts.trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    for unit in &stack.units {
        let w = leaf(tape, &unit.weight);
        let b = leaf(tape, &unit.bias);
        trace.params.extend([w, b]);
        let (wq, bq) = match opts.quant {
            QuantMode::Binary => (tape.sign_ste(w)?, tape.sign_ste(b)?),
            QuantMode::Ternary => (tape.ternarize_ste(w)?, tape.ternarize_ste(b)?),
            _ => (w, b),
        };
        let mut y = tape.conv1d(x, wq, Some(bq), &unit.spec)?;
        if let Some(bn) = &unit.norm {
            let gamma = leaf(tape, &bn.gamma);
            let beta = leaf(tape, &bn.beta);
            trace.params.extend([gamma, beta]);
            if opts.training {
                let s = tape.standardize(y, BN_EPS)?;
                trace.moments.push(s);
                y = tape.channel_affine(s, gamma, beta)?;
            } else {
                let (scale, shift) = bn.eval_affine();
                y = tape.channel_affine_const(y, &scale, &shift)?;
            }
        }
        x = match unit.spec.activation {
            Activation::Linear => y,
            Activation::Elu => tape.elu(y)?,
            Activation::SignBinary => tape.sign_ste(y)?,
            Activation::Sigmoid => tape.sigmoid(y)?,
        };
    }
    Ok((x, trace))
}

/// Writes batch moments recorded during a training-mode pass into the
/// stack's running statistics.
pub(crate) fn apply_moments(tape: &Tape, stack: &mut ConvStack, trace: &StackTrace) {
    let mut moments = trace.moments.iter();
    for unit in &mut stack.units {
        if let Some(bn) = &mut unit.norm {
            let s = *moments.next().expect("one moment per normalized unit");
            let (b, _, h) = tape.value(s).dims3().expect("rank 3");
            let (mean, var) = tape.moments(s).expect("standardize node");
            bn.update(mean, var, b * h);
        }
    }
}

#[derive(Debug, Default)]
pub(crate) struct EncoderTrace {
    pub stacks: Vec<StackTrace>,
    pub power: Option<Var>,
}

#[derive(Debug, Default)]
pub(crate) struct DecoderTrace {
    pub stacks: Vec<StackTrace>,
    pub priors: Vec<Var>,
}

impl CodecModel {
    /// Freshly initialised model with a seeded interleaver.
    pub fn new(arch: Architecture, mode: QuantMode, seed: u64) -> Result<Self> {
        arch.validate()?;
        if matches!(mode, QuantMode::PostQuant(_)) {
            return Err(Error::InvalidArgument(
                "post-quantized models are derived from trained real models".into(),
            ));
        }
        let mut rng = NoiseStream::new(seed, INIT_STREAM);
        let enc_specs = arch.encoder_specs();
        let streams = (0..STREAMS)
            .map(|_| ConvStack::init(&enc_specs, |i| i < arch.enc_layers, &mut rng))
            .collect();
        let decoder = Decoder {
            blocks: (0..arch.iterations)
                .map(|i| {
                    let last = i + 1 == arch.iterations;
                    [
                        ConvStack::init(&arch.decoder_specs(mode, false), |_| true, &mut rng),
                        ConvStack::init(&arch.decoder_specs(mode, last), |_| true, &mut rng),
                    ]
                })
                .collect(),
            codes: None,
        };
        let mut model = CodecModel {
            arch,
            mode,
            interleaver: Interleaver::random(arch.block_len, seed),
            encoder: Encoder {
                streams,
                power: PowerNorm::new(),
            },
            decoder,
        };
        if let Some(bn) = model.output_unit_mut().norm.as_mut() {
            bn.gamma = Tensor::full(&[1], LOGIT_GAMMA_INIT);
        }
        Ok(model)
    }

    fn output_unit_mut(&mut self) -> &mut ConvUnit {
        let last = self.decoder.blocks.last_mut().expect("at least one iteration");
        last[1].units.last_mut().expect("at least one layer")
    }

    /// Checks that the stored layers agree with the architecture.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.decoder.blocks.len() != self.arch.iterations {
            return Err(Error::InvalidArgument(format!(
                "decoder holds {} iterations, architecture says {}",
                self.decoder.blocks.len(),
                self.arch.iterations
            )));
        }
        if self.encoder.streams.len() != STREAMS {
            return Err(Error::InvalidArgument("encoder must have 3 streams".into()));
        }
        if self.interleaver.len() != self.arch.block_len {
            return Err(Error::InvalidArgument("interleaver length != block length".into()));
        }
        let enc_specs = self.arch.encoder_specs();
        for s in &self.encoder.streams {
            let got: Vec<_> = s.units.iter().map(|u| u.spec).collect();
            if got != enc_specs {
                return Err(Error::InvalidArgument("encoder layers do not match the architecture".into()));
            }
        }
        for (i, [a, b]) in self.decoder.blocks.iter().enumerate() {
            let last = i + 1 == self.arch.iterations;
            let ga: Vec<_> = a.units.iter().map(|u| u.spec).collect();
            let gb: Vec<_> = b.units.iter().map(|u| u.spec).collect();
            if ga != self.arch.decoder_specs(self.mode, false) || gb != self.arch.decoder_specs(self.mode, last) {
                return Err(Error::InvalidArgument(format!(
                    "decoder iteration {} does not match the architecture",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Code rate `K / N`.
    pub fn rate(&self) -> f64 {
        1.0 / STREAMS as f64
    }

    pub(crate) fn record_encoder(&self, tape: &mut Tape, u: Var, training: bool, trainable: bool) -> Result<(Var, EncoderTrace)> {
        self.record_encoder_with(tape, u, training, trainable, training)
    }

    /// Training-step encoder: layers train only when `trainable`, but the
    /// power normalization always uses batch statistics.
    pub(crate) fn record_encoder_train(&self, tape: &mut Tape, u: Var, trainable: bool) -> Result<(Var, EncoderTrace)> {
        self.record_encoder_with(tape, u, trainable, trainable, true)
    }

    fn record_encoder_with(
        &self,
        tape: &mut Tape,
        u: Var,
        training: bool,
        trainable: bool,
        power_batch: bool,
    ) -> Result<(Var, EncoderTrace)> {
        let opts = RecordOpts {
            quant: QuantMode::Real,
            training,
            trainable,
        };
        let perm = self.interleaver.perm();
        let u_pi = tape.permute(u, perm, false)?;
        let mut trace = EncoderTrace::default();
        let mut outs = Vec::with_capacity(STREAMS);
        for (j, stack) in self.encoder.streams.iter().enumerate() {
            let input = if j == 2 { u_pi } else { u };
            let (x, t) = record_stack(tape, stack, input, opts)?;
            outs.push(x);
            trace.stacks.push(t);
        }
        let x = tape.concat(&outs)?;
        let x = if power_batch {
            let s = tape.standardize(x, POWER_EPS)?;
            trace.power = Some(s);
            s
        } else {
            let (scale, shift) = self.encoder.power.affine();
            tape.channel_affine_const(x, &scale, &shift)?
        };
        Ok((x, trace))
    }

    pub(crate) fn record_decoder(&self, tape: &mut Tape, z: Var, training: bool, trainable: bool) -> Result<(Var, DecoderTrace)> {
        self.validate()?;
        let opts = RecordOpts {
            quant: self.mode,
            training,
            trainable,
        };
        let (b, c, k) = tape.value(z).dims3()?;
        if c != STREAMS || k != self.arch.block_len {
            return Err(Error::shape(
                "decode",
                format!("expected [b, 3, {}], got [{}, {}, {}]", self.arch.block_len, b, c, k),
            ));
        }
        let perm = self.interleaver.perm();
        let z12 = tape.select(z, &[0, 1])?;
        let z1 = tape.select(z, &[0])?;
        let z3 = tape.select(z, &[2])?;
        let z1_pi = tape.permute(z1, perm, false)?;
        let mut prior = tape.constant(Tensor::zeros(&[b, self.arch.features, k]));
        let mut trace = DecoderTrace::default();
        let mut logit = None;
        for (i, [first, second]) in self.decoder.blocks.iter().enumerate() {
            trace.priors.push(prior);
            let input = tape.concat(&[z12, prior])?;
            let (posterior, t1) = record_stack(tape, first, input, opts)?;
            let post_pi = tape.permute(posterior, perm, false)?;
            let input = tape.concat(&[z1_pi, z3, post_pi])?;
            let (out, t2) = record_stack(tape, second, input, opts)?;
            trace.stacks.extend([t1, t2]);
            let out = tape.permute(out, perm, true)?;
            if i + 1 == self.arch.iterations {
                logit = Some(out);
            } else {
                prior = out;
            }
        }
        let soft = tape.sigmoid(logit.expect("at least one iteration"))?;
        Ok((soft, trace))
    }

    fn check_message(&self, u: &Tensor) -> Result<()> {
        let (_, c, k) = u.dims3()?;
        if c != 1 || k != self.arch.block_len {
            return Err(Error::shape(
                "encode",
                format!("expected [b, 1, {}], got {:?}", self.arch.block_len, u.shape()),
            ));
        }
        if u.data().iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidArgument("message bits must be ±1".into()));
        }
        Ok(())
    }

    /// Encodes `[b, 1, K]` ±1 messages into `[b, 3, K]` codewords using the
    /// frozen power statistics.
    pub fn encode(&self, u: &Tensor) -> Result<Tensor> {
        self.encode_impl(u, false)
    }

    /// Encodes with batch power statistics (training-mode normalization),
    /// without touching any stored statistics.
    pub fn encode_batch_stats(&self, u: &Tensor) -> Result<Tensor> {
        self.encode_impl(u, true)
    }

    fn encode_impl(&self, u: &Tensor, batch_stats: bool) -> Result<Tensor> {
        self.check_message(u)?;
        let mut tape = Tape::new();
        let uv = tape.constant(u.clone());
        let (x, _) = self.record_encoder_power(&mut tape, uv, batch_stats)?;
        Ok(tape.value(x).clone())
    }

    /// Encoder layers run in inference mode; only the power normalization
    /// optionally uses batch statistics.
    fn record_encoder_power(&self, tape: &mut Tape, u: Var, batch_stats: bool) -> Result<(Var, EncoderTrace)> {
        self.record_encoder_with(tape, u, false, false, batch_stats)
    }

    /// Codeword before power normalization (inference-mode layers).
    pub(crate) fn record_encoder_raw(&self, tape: &mut Tape, u: Var) -> Result<Var> {
        let opts = RecordOpts {
            quant: QuantMode::Real,
            training: false,
            trainable: false,
        };
        let u_pi = tape.permute(u, self.interleaver.perm(), false)?;
        let mut outs = Vec::with_capacity(STREAMS);
        for (j, stack) in self.encoder.streams.iter().enumerate() {
            let input = if j == 2 { u_pi } else { u };
            outs.push(record_stack(tape, stack, input, opts)?.0);
        }
        tape.concat(&outs)
    }

    /// Re-estimates the frozen power statistics from `batches` random
    /// message batches.
    pub fn calibrate_power(&mut self, batches: usize, batch_size: usize, seed: u64, stream: u64) -> Result<()> {
        let k = self.arch.block_len;
        let mut sum = [0.0; STREAMS];
        let mut sq = [0.0; STREAMS];
        let mut n = 0usize;
        for i in 0..batches {
            let mut rng = NoiseStream::new(seed, stream + i as u64);
            let mut bits = vec![0.0; batch_size * k];
            rng.fill_bits(&mut bits);
            let mut tape = Tape::new();
            let u = tape.constant(Tensor::new(vec![batch_size, 1, k], bits)?);
            let raw = self.record_encoder_raw(&mut tape, u)?;
            let data = tape.value(raw).data();
            for b in 0..batch_size {
                for c in 0..STREAMS {
                    for &v in &data[(b * STREAMS + c) * k..(b * STREAMS + c + 1) * k] {
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
            }
            n += batch_size * k;
        }
        if n == 0 {
            return Err(Error::InvalidArgument("calibration needs at least one block".into()));
        }
        for c in 0..STREAMS {
            let m = sum[c] / n as f64;
            self.encoder.power.mean[c] = m;
            self.encoder.power.var[c] = (sq[c] / n as f64 - m * m).max(0.0);
        }
        Ok(())
    }

    /// Inference-mode decoding of `[b, 3, K]` channel outputs.
    pub fn decode(&self, z: &Tensor) -> Result<Decoded> {
        Ok(self.decode_with_priors(z)?.0)
    }

    /// Decoding that also returns the prior fed into each iteration.
    pub fn decode_with_priors(&self, z: &Tensor) -> Result<(Decoded, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (soft, trace) = self.record_decoder(&mut tape, zv, false, false)?;
        let priors = trace.priors.iter().map(|&p| tape.value(p).clone()).collect();
        Ok((Decoded::from_soft(tape.value(soft).clone()), priors))
    }

    /// The decoder weights as the forward pass sees them (±1 for binary,
    /// {−1, 0, +1} for ternary), in stack order: weight, bias per unit.
    pub fn decoder_weight_views(&self) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        for unit in self.decoder.units() {
            out.push(self.mode.weight_view(&unit.weight)?);
            out.push(self.mode.weight_view(&unit.bias)?);
        }
        Ok(out)
    }

    /// QuantTurboAE-style baseline: snaps every decoder weight and bias of a
    /// trained real model to a symmetric q-bit codebook.
    pub fn post_quantize(&self, bits: u8) -> Result<CodecModel> {
        let mode = QuantMode::post_quant(bits)?;
        if self.mode != QuantMode::Real {
            return Err(Error::InvalidArgument(format!(
                "only real models can be post-quantized (model is {})",
                self.mode
            )));
        }
        let mut out = self.clone();
        out.mode = mode;
        let mut codes = Vec::new();
        for stack in out.decoder.stacks_mut() {
            for unit in &mut stack.units {
                for t in [&mut unit.weight, &mut unit.bias] {
                    let q = QuantizedTensor::encode(t, bits)?;
                    *t = q.decode();
                    codes.push(q);
                }
            }
        }
        out.decoder.codes = Some(codes);
        Ok(out)
    }

    /// Parameter counts `(encoder, decoder)`; weights and biases only.
    pub fn param_counts(&self) -> (usize, usize) {
        (self.encoder.weight_count(), self.decoder.weight_count())
    }
}
