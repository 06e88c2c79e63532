//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every forward op in creation order. Leaves are either
//! parameters (gradients wanted) or constants; an op node only keeps a
//! backward rule when at least one of its inputs needs a gradient, so frozen
//! sub-networks cost nothing on the way back.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// BCE probability clamp.
pub const BCE_EPS: f64 = 1e-7;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Activation applied after a convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Elu,
    SignBinary,
    Sigmoid,
}

/// Shape contract of one same-padded 1D convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub has_bias: bool,
    pub activation: Activation,
}

impl ConvLayerSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, activation: Activation) -> Result<Self> {
        let spec = ConvLayerSpec {
            c_in,
            c_out,
            kernel,
            has_bias: true,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel width must be odd, got {}",
                self.kernel
            )));
        }
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.c_out, self.c_in, self.kernel]
    }

    pub fn weight_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    Elu(usize),
    Sigmoid(usize),
    Standardize {
        x: usize,
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    ChannelAffineConst {
        x: usize,
        scale: Vec<f64>,
    },
    AddConst(usize),
    Concat(Vec<usize>),
    Select {
        x: usize,
        channels: Vec<usize>,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
        inverse: bool,
    },
    SignSte(usize),
    TernarizeSte(usize),
    Bce {
        p: usize,
        target: Vec<f64>,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of forward ops with their backward rules.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Sign with `sign(0) = +1`.
#[inline]
pub fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: None,
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape("variable belongs to a different tape"));
        }
        Ok(v.idx)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    /// Mean and biased variance per channel recorded by [`Tape::standardize`].
    pub fn moments(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes.get(v.idx)?.op {
            Op::Standardize { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Same-padded cross-correlation, `[b, c_in, h] * [c_out, c_in, k] -> [b, c_out, h]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: &ConvLayerSpec) -> Result<Var> {
        spec.validate()?;
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let (batch, c_in, len) = self.nodes[xi].value.dims3()?;
        if c_in != spec.c_in {
            return Err(Error::shape(
                "conv1d",
                format!("input has {} channels, layer expects {}", c_in, spec.c_in),
            ));
        }
        if self.nodes[wi].value.shape() != spec.weight_shape() {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "weight shape {:?}, expected {:?}",
                    self.nodes[wi].value.shape(),
                    spec.weight_shape()
                ),
            ));
        }
        if let Some(b) = bi {
            if self.nodes[b].value.len() != spec.c_out {
                return Err(Error::shape("conv1d", "bias length != c_out"));
            }
        }
        let geom = ConvGeometry {
            batch,
            c_in,
            c_out: spec.c_out,
            kernel: spec.kernel,
            len,
        };
        let mut out = vec![0.0; batch * spec.c_out * len];
        kernels::conv1d_forward(
            geom,
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            bi.map(|b| self.nodes[b].value.data()),
            &mut out,
        );
        let out = Tensor::new(vec![batch, spec.c_out, len], out)?;
        check_finite("conv1d", &out)?;
        let needs = self.needs(xi) || self.needs(wi) || bi.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv1d {
                x: xi,
                w: wi,
                bias: bi,
                geom,
            },
            needs,
        ))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi]
            .value
            .map(|v| if v > 0.0 { v } else { v.exp_m1() });
        check_finite("elu", &out)?;
        let needs = self.needs(xi);
        Ok(self.push(out, Op::Elu(xi), needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(sigmoid);
        check_finite("sigmoid", &out)?;
        let needs = self.needs(xi);
        Ok(self.push(out, Op::Sigmoid(xi), needs))
    }

    /// Per-channel standardization over batch and length using batch moments.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let (b, c, h) = self.nodes[xi].value.dims3()?;
        let n = b * h;
        if n < 2 {
            return Err(Error::shape("standardize", "needs batch * length >= 2"));
        }
        let data = self.nodes[xi].value.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += data[(bi * c + ch) * h..(bi * c + ch + 1) * h].iter().sum::<f64>();
            }
            let m = s / n as f64;
            let mut s2 = 0.0;
            for bi in 0..b {
                s2 += data[(bi * c + ch) * h..(bi * c + ch + 1) * h]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = s2 / n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = data.to_vec();
        for bi in 0..b {
            for ch in 0..c {
                for v in &mut out[(bi * c + ch) * h..(bi * c + ch + 1) * h] {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
            }
        }
        let out = Tensor::new(vec![b, c, h], out)?;
        check_finite("standardize", &out)?;
        let needs = self.needs(xi);
        Ok(self.push(
            out,
            Op::Standardize {
                x: xi,
                mean,
                var,
                inv_std,
            },
            needs,
        ))
    }

    /// `y[:, c, :] = gamma[c] · x[:, c, :] + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (b, c, h) = self.nodes[xi].value.dims3()?;
        if self.nodes[gi].value.len() != c || self.nodes[bi].value.len() != c {
            return Err(Error::shape("channel_affine", "gamma/beta length != channels"));
        }
        let g = self.nodes[gi].value.data().to_vec();
        let be = self.nodes[bi].value.data().to_vec();
        let out = affine(&self.nodes[xi].value, &g, &be, b, c, h)?;
        check_finite("channel_affine", &out)?;
        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        Ok(self.push(
            out,
            Op::ChannelAffine {
                x: xi,
                gamma: gi,
                beta: bi,
            },
            needs,
        ))
    }

    /// `y[:, c, :] = x[:, c, :] · scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine_const(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let xi = self.idx(x)?;
        let (b, c, h) = self.nodes[xi].value.dims3()?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape("channel_affine_const", "coefficient length != channels"));
        }
        let out = affine(&self.nodes[xi].value, scale, shift, b, c, h)?;
        check_finite("channel_affine_const", &out)?;
        let needs = self.needs(xi);
        Ok(self.push(
            out,
            Op::ChannelAffineConst {
                x: xi,
                scale: scale.to_vec(),
            },
            needs,
        ))
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.shape() != c.shape() {
            return Err(Error::shape("add_const", format!("{:?} vs {:?}", xv.shape(), c.shape())));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        check_finite("add_const", &out)?;
        let needs = self.needs(xi);
        Ok(self.push(out, Op::AddConst(xi), needs))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let first = idx
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let (b, _, h) = self.nodes[*first].value.dims3()?;
        let mut dims = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (bb, c, hh) = self.nodes[i].value.dims3()?;
            if bb != b || hh != h {
                return Err(Error::shape("concat", "batch/length mismatch"));
            }
            dims.push(c);
        }
        let c_total: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(b * c_total * h);
        for bi in 0..b {
            for (&i, &c) in idx.iter().zip(&dims) {
                out.extend_from_slice(&self.nodes[i].value.data()[bi * c * h..(bi + 1) * c * h]);
            }
        }
        let out = Tensor::new(vec![b, c_total, h], out)?;
        let needs = idx.iter().any(|&i| self.needs(i));
        Ok(self.push(out, Op::Concat(idx), needs))
    }

    /// Picks channels (in the given order) from a `[b, c, h]` tensor.
    pub fn select(&mut self, x: Var, channels: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let (b, c, h) = self.nodes[xi].value.dims3()?;
        if let Some(&bad) = channels.iter().find(|&&ch| ch >= c) {
            return Err(Error::shape("select", format!("channel {} of {}", bad, c)));
        }
        let data = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(b * channels.len() * h);
        for bi in 0..b {
            for &ch in channels {
                out.extend_from_slice(&data[(bi * c + ch) * h..(bi * c + ch + 1) * h]);
            }
        }
        let out = Tensor::new(vec![b, channels.len(), h], out)?;
        let needs = self.needs(xi);
        Ok(self.push(
            out,
            Op::Select {
                x: xi,
                channels: channels.to_vec(),
            },
            needs,
        ))
    }

    /// Permutes the length axis: `out[.., j] = x[.., perm[j]]`, or the inverse
    /// mapping `out[.., perm[j]] = x[.., j]` when `inverse` is set.
    pub fn permute(&mut self, x: Var, perm: &[usize], inverse: bool) -> Result<Var> {
        let xi = self.idx(x)?;
        let (b, c, h) = self.nodes[xi].value.dims3()?;
        if perm.len() != h {
            return Err(Error::shape(
                "permute",
                format!("permutation of length {} on length {}", perm.len(), h),
            ));
        }
        let out = permute_rows(self.nodes[xi].value.data(), b * c, h, perm, inverse);
        let out = Tensor::new(vec![b, c, h], out)?;
        let needs = self.needs(xi);
        Ok(self.push(
            out,
            Op::Permute {
                x: xi,
                perm: perm.to_vec(),
                inverse,
            },
            needs,
        ))
    }

    /// Binarization with straight-through gradient `grad · 1{|r| ≤ 1}`.
    pub fn sign_ste(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(sign);
        let needs = self.needs(xi);
        Ok(self.push(out, Op::SignSte(xi), needs))
    }

    /// Ternarization (`Δ = 0.7 · mean|r|` over the whole tensor) with the same
    /// straight-through mask as [`Tape::sign_ste`].
    pub fn ternarize_ste(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = crate::quantize::ternarize(&self.nodes[xi].value)?;
        let needs = self.needs(xi);
        Ok(self.push(out, Op::TernarizeSte(xi), needs))
    }

    /// Mean binary cross-entropy; `target` entries must be 0 or 1.
    pub fn bce_loss(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        let pi = self.idx(p)?;
        let pv = &self.nodes[pi].value;
        if pv.shape() != target.shape() {
            return Err(Error::shape("bce_loss", format!("{:?} vs {:?}", pv.shape(), target.shape())));
        }
        if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::InvalidArgument("BCE targets must be 0 or 1".into()));
        }
        let n = pv.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let out = Tensor::scalar(loss);
        check_finite("bce_loss", &out)?;
        let needs = self.needs(pi);
        Ok(self.push(
            out,
            Op::Bce {
                p: pi,
                target: target.data().to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.data().iter().sum());
        check_finite("sum", &out)?;
        let needs = self.needs(xi);
        Ok(self.push(out, Op::Sum(xi), needs))
    }

    /// Populates gradients of every node that depends on a parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.grads.is_some() {
            return Err(Error::Tape("backward already ran; call reset_grads first"));
        }
        if matches!(self.nodes[li].op, Op::Leaf) {
            return Err(Error::Tape("backward called without a recorded forward pass"));
        }
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Tape("loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last backward pass for `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.as_ref()?.get(v.idx)?.as_deref()
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |j: usize, delta: Vec<f64>| {
            if !nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv1d { x, w, bias, geom } => {
                if nodes[*x].needs_grad {
                    let mut dx = vec![0.0; nodes[*x].value.len()];
                    kernels::conv1d_backward_input(*geom, g, nodes[*w].value.data(), &mut dx);
                    acc(*x, dx);
                }
                if nodes[*w].needs_grad {
                    let mut dw = vec![0.0; nodes[*w].value.len()];
                    kernels::conv1d_backward_weight(*geom, g, nodes[*x].value.data(), &mut dw);
                    acc(*w, dw);
                }
                if let Some(b) = bias {
                    if nodes[*b].needs_grad {
                        let mut db = vec![0.0; geom.c_out];
                        kernels::conv1d_backward_bias(*geom, g, &mut db);
                        acc(*b, db);
                    }
                }
            }
            Op::Elu(x) => {
                let d = nodes[*x]
                    .value
                    .data()
                    .iter()
                    .zip(nodes[i].value.data())
                    .zip(g)
                    .map(|((&xv, &yv), &gv)| if xv > 0.0 { gv } else { gv * (yv + 1.0) })
                    .collect();
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                acc(*x, d);
            }
            Op::Standardize { x, inv_std, .. } => {
                let (b, c, h) = nodes[i].value.dims3().expect("rank 3");
                let y = nodes[i].value.data();
                let n = (b * h) as f64;
                let mut d = vec![0.0; y.len()];
                for ch in 0..c {
                    let (mut sg, mut sgy) = (0.0, 0.0);
                    for bi in 0..b {
                        let r = (bi * c + ch) * h..(bi * c + ch + 1) * h;
                        for (gv, yv) in g[r.clone()].iter().zip(&y[r]) {
                            sg += gv;
                            sgy += gv * yv;
                        }
                    }
                    let k = inv_std[ch] / n;
                    for bi in 0..b {
                        let r = (bi * c + ch) * h..(bi * c + ch + 1) * h;
                        for ((dv, gv), yv) in d[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&y[r]) {
                            *dv = k * (n * gv - sg - yv * sgy);
                        }
                    }
                }
                acc(*x, d);
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (b, c, h) = nodes[i].value.dims3().expect("rank 3");
                let xv = nodes[*x].value.data();
                let gam = nodes[*gamma].value.data();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let r = (bi * c + ch) * h..(bi * c + ch + 1) * h;
                        for ((dxv, &gv), &xx) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xv[r]) {
                            *dxv = gv * gam[ch];
                            dg[ch] += gv * xx;
                            db[ch] += gv;
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::ChannelAffineConst { x, scale } => {
                let (b, c, h) = nodes[i].value.dims3().expect("rank 3");
                let mut dx = g.to_vec();
                for bi in 0..b {
                    for ch in 0..c {
                        for v in &mut dx[(bi * c + ch) * h..(bi * c + ch + 1) * h] {
                            *v *= scale[ch];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::AddConst(x) => acc(*x, g.to_vec()),
            Op::Concat(parts) => {
                let (b, c_total, h) = nodes[i].value.dims3().expect("rank 3");
                let dims: Vec<usize> = parts.iter().map(|&p| nodes[p].value.shape()[1]).collect();
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(&dims) {
                    if nodes[p].needs_grad {
                        let mut d = Vec::with_capacity(b * c * h);
                        for bi in 0..b {
                            let start = (bi * c_total + offset) * h;
                            d.extend_from_slice(&g[start..start + c * h]);
                        }
                        acc(p, d);
                    }
                    offset += c;
                }
            }
            Op::Select { x, channels } => {
                let (b, c, h) = nodes[*x].value.dims3().expect("rank 3");
                let k = channels.len();
                let mut d = vec![0.0; b * c * h];
                for bi in 0..b {
                    for (slot, &ch) in channels.iter().enumerate() {
                        let src = &g[(bi * k + slot) * h..(bi * k + slot + 1) * h];
                        let dst = &mut d[(bi * c + ch) * h..(bi * c + ch + 1) * h];
                        dst.iter_mut().zip(src).for_each(|(a, s)| *a += s);
                    }
                }
                acc(*x, d);
            }
            Op::Permute { x, perm, inverse } => {
                let (b, c, h) = nodes[i].value.dims3().expect("rank 3");
                acc(*x, permute_rows(g, b * c, h, perm, !inverse));
            }
            Op::SignSte(x) | Op::TernarizeSte(x) => {
                let d = crate::quantize::ste_mask(g, nodes[*x].value.data());
                acc(*x, d);
            }
            Op::Bce { p, target } => {
                let n = target.len() as f64;
                let d = nodes[*p]
                    .value
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&pv, &t)| {
                        let pv = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        g[0] * (-(t / pv) + (1.0 - t) / (1.0 - pv)) / n
                    })
                    .collect();
                acc(*p, d);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; nodes[*x].value.len()]),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn affine(x: &Tensor, scale: &[f64], shift: &[f64], b: usize, c: usize, h: usize) -> Result<Tensor> {
    let mut out = x.data().to_vec();
    for bi in 0..b {
        for ch in 0..c {
            for v in &mut out[(bi * c + ch) * h..(bi * c + ch + 1) * h] {
                *v = *v * scale[ch] + shift[ch];
            }
        }
    }
    Tensor::new(vec![b, c, h], out)
}

/// Applies a length-axis permutation to each of `rows` rows of length `h`.
pub(crate) fn permute_rows(data: &[f64], rows: usize, h: usize, perm: &[usize], inverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; rows * h];
    for r in 0..rows {
        let src = &data[r * h..(r + 1) * h];
        let dst = &mut out[r * h..(r + 1) * h];
        if inverse {
            for (j, &p) in perm.iter().enumerate() {
                dst[p] = src[j];
            }
        } else {
            for (j, &p) in perm.iter().enumerate() {
                dst[j] = src[p];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t3(b: usize, c: usize, h: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![b, c, h], data).unwrap()
    }

    #[test]
    fn conv1d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t3(1, 1, 3, vec![1.0, 2.0, 3.0]));
        let spec = ConvLayerSpec {
            has_bias: false,
            ..ConvLayerSpec::new(1, 1, 3, Activation::Linear).unwrap()
        };
        let id = tape.constant(t3(1, 1, 3, vec![0.0, 1.0, 0.0]));
        let y = tape.conv1d(x, id, None, &spec).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);

        let ones = tape.constant(t3(1, 1, 3, vec![1.0; 3]));
        let y = tape.conv1d(x, ones, None, &spec).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);

        let zero = tape.constant(t3(1, 1, 3, vec![0.0; 3]));
        let w = tape.constant(t3(1, 1, 3, vec![0.3, -2.0, 0.7]));
        let beta = tape.constant(Tensor::vector(vec![0.25]));
        let y = tape.conv1d(zero, w, Some(beta), &spec).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn conv1d_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(t3(1, 2, 4, vec![0.0; 8]));
        let w = tape.constant(t3(1, 1, 3, vec![0.0; 3]));
        let spec = ConvLayerSpec::new(1, 1, 3, Activation::Linear).unwrap();
        assert!(matches!(tape.conv1d(x, w, None, &spec), Err(Error::Shape { .. })));
        assert!(ConvLayerSpec::new(1, 1, 4, Activation::Linear).is_err());
    }

    #[test]
    fn conv1d_reports_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(t3(1, 1, 2, vec![1e308, 1e308]));
        let w = tape.constant(t3(1, 1, 3, vec![1e308, 1e308, 1e308]));
        let spec = ConvLayerSpec::new(1, 1, 3, Activation::Linear).unwrap();
        assert!(matches!(tape.conv1d(x, w, None, &spec), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn elu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 2.0, -1.0]));
        let y = tape.elu(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 2.0);
        assert_abs_diff_eq!(v[2], -0.632_120_558_828_557_7, epsilon = 1e-12);

        let x = tape.constant(Tensor::vector(vec![0.0, 3.0, -3.0, 40.0]));
        let s = tape.sigmoid(x).unwrap();
        let v = tape.value(s).data();
        assert_eq!(v[0], 0.5);
        assert_abs_diff_eq!(v[1] + v[2], 1.0, epsilon = 1e-15);
        assert!(v[3] > v[1] && v[3] <= 1.0);
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.5; 4]));
        let l = tape.bce_loss(p, &Tensor::vector(vec![1.0, 0.0, 1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(tape.value(l).data()[0], std::f64::consts::LN_2, epsilon = 1e-12);

        let p = tape.constant(Tensor::vector(vec![0.9, 0.1]));
        let l = tape.bce_loss(p, &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(tape.value(l).data()[0], 0.105_360_515_657_826_3, epsilon = 1e-12);

        let p = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let l = tape.bce_loss(p, &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(tape.value(l).data()[0] < 1e-6);

        let p = tape.constant(Tensor::vector(vec![0.5]));
        assert!(tape.bce_loss(p, &Tensor::vector(vec![0.5])).is_err());
    }

    #[test]
    fn standardize_zero_mean_unit_variance() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let x = tape.constant(t3(3, 2, 4, data));
        let y = tape.standardize(x, 1e-12).unwrap();
        let v = tape.value(y).data();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| v[(b * 2 + ch) * 4..(b * 2 + ch + 1) * 4].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 12.0;
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-9);
        }
        let c = tape.constant(t3(1, 1, 4, vec![3.0; 4]));
        let y = tape.standardize(c, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(1.0));
        assert!(tape.backward(w).is_err());
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err());
        tape.reset_grads();
        tape.backward(s).unwrap();

        let mut other = Tape::new();
        let o = other.param(Tensor::scalar(1.0));
        let os = other.sum(o).unwrap();
        assert!(tape.backward(os).is_err());
        assert!(tape.grad(o).is_none());
    }

    #[test]
    fn tapes_are_isolated() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let wa = a.param(Tensor::vector(vec![1.0, 2.0]));
        let wb = b.param(Tensor::vector(vec![1.0, 2.0]));
        let sa = a.sum(wa).unwrap();
        let ea = b.elu(wb).unwrap();
        let sb = b.sum(ea).unwrap();
        a.backward(sa).unwrap();
        assert!(b.grad(wb).is_none());
        b.backward(sb).unwrap();
        assert_eq!(a.grad(wa).unwrap(), &[1.0, 1.0]);
        assert_eq!(b.grad(wb).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let cc = tape.add_const(c, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        let s1 = tape.sum(cc).unwrap();
        let s2 = tape.sum(w).unwrap();
        let both = tape.concat(&[]);
        assert!(both.is_err());
        let _ = s1;
        tape.backward(s2).unwrap();
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn permute_and_inverse() {
        let mut tape = Tape::new();
        let x = tape.constant(t3(1, 1, 3, vec![10.0, 20.0, 30.0]));
        let y = tape.permute(x, &[2, 0, 1], false).unwrap();
        assert_eq!(tape.value(y).data(), &[30.0, 10.0, 20.0]);
        let z = tape.permute(y, &[2, 0, 1], true).unwrap();
        assert_eq!(tape.value(z).data(), &[10.0, 20.0, 30.0]);
    }
}
