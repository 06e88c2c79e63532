//! Independent oracles shared by the integration tests and the acceptance
//! runner.
#![allow(dead_code)]

use bitturbo_core::autodiff::{Activation, ConvLayerSpec, Tape, Var};
use bitturbo_core::bitkernel::{packed_conv1d, packed_conv1d_counts, PackedActivations, PackedConvLayer};
use bitturbo_core::{Result, Tensor};

pub const GRAD_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared on an absolute scale, where
/// central differences are dominated by rounding.
const GRAD_FLOOR: f64 = 1e-5;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `±[0.05, 2)`, away from the kinks at zero.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..2.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn signs(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Builds the op under test from its leaf inputs.
pub type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Loss used to probe an op: BCE of `sigmoid(op(x))` against fixed 0/1 targets,
/// so every output element gets a distinct upstream gradient.
fn probe_loss(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let target = Tensor::new(shape, (0..n).map(|i| ((i * 7 + 3) % 5 < 2) as u8 as f64).collect())?;
    let p = tape.sigmoid(out)?;
    tape.bce_loss(p, &target)
}

fn eval_loss(build: &Builder, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = probe_loss(&mut tape, out)?;
    Ok(tape.value(loss).data()[0])
}

/// Worst relative disagreement (floored at `GRAD_FLOOR`) between the tape gradient and central
/// differences, over every element of every input.
pub fn grad_check(build: &Builder, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = probe_loss(&mut tape, out)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).expect("param grad").to_vec()).collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        for (i, &a) in analytic[which].iter().enumerate().take(input.len()) {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            let numeric = (eval_loss(build, &plus)? - eval_loss(build, &minus)?) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Shape and weights of one randomized packed-convolution case.
#[derive(Debug, Clone)]
pub struct ConvCase {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub len: usize,
    pub ternary: bool,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvCase {
    pub fn random(rng: &mut impl Rng, ternary: bool) -> Self {
        let c_in = rng.gen_range(1..=32);
        let c_out = rng.gen_range(1..=8);
        let kernel = [1, 3, 5][rng.gen_range(0..3)];
        let len = rng.gen_range(1..=128);
        Self::with_shape(rng, c_in, c_out, kernel, len, ternary)
    }

    pub fn with_shape(rng: &mut impl Rng, c_in: usize, c_out: usize, kernel: usize, len: usize, ternary: bool) -> Self {
        let x = signs(rng, c_in * len);
        let w = (0..c_out * c_in * kernel)
            .map(|_| {
                if ternary {
                    [-1.0, 0.0, 1.0][rng.gen_range(0..3)]
                } else if rng.gen::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        let reach = (c_in * kernel) as i64;
        let bias = (0..c_out).map(|_| rng.gen_range(-reach / 4..=reach / 4) as f64).collect();
        ConvCase {
            c_in,
            c_out,
            kernel,
            len,
            ternary,
            x,
            w,
            bias,
        }
    }

    /// Float oracle by direct summation: the zero-padded convolution and its
    /// `sign` (`sign(0) = +1`).
    pub fn float_path(&self) -> (Vec<f64>, Vec<f64>) {
        let (ci, k, h) = (self.c_in, self.kernel, self.len as isize);
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; self.c_out * self.len];
        for o in 0..self.c_out {
            for j in 0..h {
                let mut acc = self.bias[o];
                for i in 0..ci {
                    for t in 0..k {
                        let src = j + t as isize - pad;
                        if (0..h).contains(&src) {
                            acc += self.w[(o * ci + i) * k + t] * self.x[i * self.len + src as usize];
                        }
                    }
                }
                out[o * self.len + j as usize] = acc;
            }
        }
        let s = out.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
        (out, s)
    }

    /// Number of output elements where the packed path disagrees with the
    /// float oracle, either in the integer counts or in the fused sign.
    pub fn mismatches(&self) -> Result<usize> {
        let spec = ConvLayerSpec::new(self.c_in, self.c_out, self.kernel, Activation::SignBinary)?;
        let w = Tensor::new(spec.weight_shape().to_vec(), self.w.clone())?;
        let b = Tensor::vector(self.bias.clone());
        let layer = PackedConvLayer::from_weights(spec, &w, Some(&b), self.ternary)?;
        let x = PackedActivations::from_signs(&self.x, self.c_in, self.len)?;
        let counts = packed_conv1d_counts(&x, &layer)?;
        let fused = packed_conv1d(&x, &layer, &vec![0; self.c_out])?.to_signs();
        let (pre, s) = self.float_path();
        Ok(pre
            .iter()
            .zip(&counts)
            .zip(s.iter().zip(&fused))
            .filter(|((&f, &c), (&a, &b))| f != c as f64 || a != b)
            .count())
    }
}

/// One differentiable op with concrete inputs.
pub struct GradCase {
    pub name: &'static str,
    pub build: Box<Builder<'static>>,
    pub inputs: Vec<Tensor>,
}

fn case(name: &'static str, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static, inputs: Vec<Tensor>) -> GradCase {
    GradCase {
        name,
        build: Box::new(build),
        inputs,
    }
}

/// Every differentiable tape op, alone and composed into a layer stack.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut r = rng(1);
    let mut v = Vec::new();
    for k in [1, 3, 5] {
        let spec = ConvLayerSpec::new(3, 2, k, Activation::Linear).unwrap();
        v.push(case(
            "conv1d",
            move |t, p| t.conv1d(p[0], p[1], Some(p[2]), &spec),
            vec![uniform(&mut r, &[2, 3, 6], -1.0, 1.0), uniform(&mut r, &[2, 3, k], -0.5, 0.5), uniform(&mut r, &[2], -0.5, 0.5)],
        ));
    }
    let spec = ConvLayerSpec {
        has_bias: false,
        ..ConvLayerSpec::new(2, 3, 5, Activation::Linear).unwrap()
    };
    v.push(case(
        "conv1d/no-bias/short",
        move |t, p| t.conv1d(p[0], p[1], None, &spec),
        vec![uniform(&mut r, &[1, 2, 2], -1.0, 1.0), uniform(&mut r, &[3, 2, 5], -0.5, 0.5)],
    ));
    let x = away_from_zero(&mut r, &[2, 2, 5]);
    v.push(case("elu", |t, p| t.elu(p[0]), vec![x.clone()]));
    v.push(case("sigmoid", |t, p| t.sigmoid(p[0]), vec![x.clone()]));
    let c = uniform(&mut r, &[2, 2, 5], -1.0, 1.0);
    v.push(case("add_const", move |t, p| t.add_const(p[0], &c), vec![x]));
    v.push(case("standardize", |t, p| t.standardize(p[0], 1e-5), vec![uniform(&mut r, &[3, 2, 4], -2.0, 2.0)]));
    let x = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    v.push(case(
        "channel_affine",
        |t, p| t.channel_affine(p[0], p[1], p[2]),
        vec![x.clone(), uniform(&mut r, &[3], 0.5, 1.5), uniform(&mut r, &[3], -0.5, 0.5)],
    ));
    v.push(case(
        "channel_affine_const",
        |t, p| t.channel_affine_const(p[0], &[0.5, -2.0, 1.25], &[0.1, 0.0, -0.3]),
        vec![x],
    ));
    let a = uniform(&mut r, &[2, 2, 5], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 1, 5], -1.0, 1.0);
    v.push(case("concat", |t, p| t.concat(&[p[0], p[1], p[0]]), vec![a.clone(), b]));
    v.push(case("select", |t, p| t.select(p[0], &[1, 0, 1]), vec![a.clone()]));
    let perm = [3, 0, 4, 1, 2];
    v.push(case("permute", move |t, p| t.permute(p[0], &perm, false), vec![a.clone()]));
    v.push(case("permute/inverse", move |t, p| t.permute(p[0], &perm, true), vec![a]));
    // the probe itself ends in sigmoid + BCE; here BCE also sees raw probabilities
    let target = Tensor::new(vec![1, 1, 6], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    v.push(case("bce_loss", move |t, p| t.bce_loss(p[0], &target), vec![uniform(&mut r, &[1, 1, 6], 0.1, 0.9)]));
    v.push(case(
        "sum",
        |t, p| {
            let e = t.elu(p[0])?;
            t.sum(e)
        },
        vec![uniform(&mut r, &[2, 1, 3], -1.0, 1.0)],
    ));
    let s1 = ConvLayerSpec::new(2, 3, 3, Activation::Elu).unwrap();
    let s2 = ConvLayerSpec::new(3, 1, 5, Activation::Linear).unwrap();
    v.push(case(
        "stack",
        move |t, p| {
            let h = t.conv1d(p[0], p[1], Some(p[2]), &s1)?;
            let h = t.standardize(h, 1e-5)?;
            let h = t.channel_affine(h, p[4], p[5])?;
            let h = t.elu(h)?;
            let h = t.permute(h, &[6, 5, 4, 3, 2, 1, 0], false)?;
            t.conv1d(h, p[3], None, &s2)
        },
        vec![
            uniform(&mut r, &[2, 2, 7], -1.0, 1.0),
            uniform(&mut r, &[3, 2, 3], -0.5, 0.5),
            uniform(&mut r, &[3], -0.2, 0.2),
            uniform(&mut r, &[1, 3, 5], -0.5, 0.5),
            uniform(&mut r, &[3], 0.5, 1.5),
            uniform(&mut r, &[3], -0.5, 0.5),
        ],
    ));
    v
}

/// Gradient arriving at a quantizer's output and leaving at its input.
pub fn ste_grads(r: &Tensor, ternary: bool) -> (Tensor, Tensor) {
    let mut t = Tape::new();
    let x = t.param(r.clone());
    let q = if ternary { t.ternarize_ste(x) } else { t.sign_ste(x) }.unwrap();
    let n = r.len();
    let shape = r.shape().to_vec();
    let scale: Vec<f64> = (0..shape[1]).map(|c| 0.5 + c as f64).collect();
    let y = t.channel_affine_const(q, &scale, &vec![0.1; shape[1]]).unwrap();
    let p = t.sigmoid(y).unwrap();
    let target = Tensor::new(shape.clone(), (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
    let loss = t.bce_loss(p, &target).unwrap();
    t.backward(loss).unwrap();
    let gq = Tensor::new(shape.clone(), t.grad(q).unwrap().to_vec()).unwrap();
    let gx = Tensor::new(shape, t.grad(x).unwrap().to_vec()).unwrap();
    (gq, gx)
}

/// `grad_b · 1{|r| ≤ 1}` written out directly.
pub fn masked(gq: &Tensor, r: &Tensor) -> Tensor {
    let d = gq.data().iter().zip(r.data()).map(|(&g, &v)| if v.abs() <= 1.0 { g } else { 0.0 }).collect();
    Tensor::new(r.shape().to_vec(), d).unwrap()
}

