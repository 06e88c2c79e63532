//! Raw same-padded 1D convolution kernels over flat `f64` buffers.
//!
//! Both the autodiff tape and the deployed decoder's float layers call these,
//! so the two paths produce identical bits for identical inputs.

use crate::parallel;

/// Geometry of one same-padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub len: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Output index range `[lo, hi)` for which tap `t` reads inside the input.
    #[inline]
    pub fn tap_range(&self, t: usize) -> (usize, usize, isize) {
        let d = t as isize - self.pad() as isize;
        let h = self.len as isize;
        let lo = (-d).max(0).min(h) as usize;
        let hi = (h - d).clamp(0, h) as usize;
        (lo, hi.max(lo), d)
    }
}

/// `out[b, o, j] = bias[o] + Σ_i Σ_t w[o, i, t] · x[b, i, j + t − pad]`.
pub fn conv1d_forward(g: ConvGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    debug_assert_eq!(x.len(), g.batch * g.c_in * g.len);
    debug_assert_eq!(w.len(), g.c_out * g.c_in * g.kernel);
    debug_assert_eq!(out.len(), g.batch * g.c_out * g.len);
    let h = g.len;
    parallel::for_each_chunk_mut(out, g.c_out * h, |b, out_b| {
        let x_b = &x[b * g.c_in * h..(b + 1) * g.c_in * h];
        for o in 0..g.c_out {
            let row = &mut out_b[o * h..(o + 1) * h];
            let b0 = bias.map_or(0.0, |bv| bv[o]);
            row.iter_mut().for_each(|v| *v = b0);
            for i in 0..g.c_in {
                let x_row = &x_b[i * h..(i + 1) * h];
                for t in 0..g.kernel {
                    let wv = w[(o * g.c_in + i) * g.kernel + t];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi, d) = g.tap_range(t);
                    let src = &x_row[(lo as isize + d) as usize..(hi as isize + d) as usize];
                    for (acc, &xv) in row[lo..hi].iter_mut().zip(src) {
                        *acc += wv * xv;
                    }
                }
            }
        }
    });
}

/// Gradient with respect to the input.
pub fn conv1d_backward_input(g: ConvGeometry, dout: &[f64], w: &[f64], dx: &mut [f64]) {
    let h = g.len;
    parallel::for_each_chunk_mut(dx, g.c_in * h, |b, dx_b| {
        let dout_b = &dout[b * g.c_out * h..(b + 1) * g.c_out * h];
        for o in 0..g.c_out {
            let d_row = &dout_b[o * h..(o + 1) * h];
            for i in 0..g.c_in {
                let dx_row = &mut dx_b[i * h..(i + 1) * h];
                for t in 0..g.kernel {
                    let wv = w[(o * g.c_in + i) * g.kernel + t];
                    let (lo, hi, d) = g.tap_range(t);
                    let dst = &mut dx_row[(lo as isize + d) as usize..(hi as isize + d) as usize];
                    for (acc, &dv) in dst.iter_mut().zip(&d_row[lo..hi]) {
                        *acc += wv * dv;
                    }
                }
            }
        }
    });
}

/// Gradient with respect to the weights; `dw` is overwritten.
pub fn conv1d_backward_weight(g: ConvGeometry, dout: &[f64], x: &[f64], dw: &mut [f64]) {
    let h = g.len;
    parallel::for_each_chunk_mut(dw, g.c_in * g.kernel, |o, dw_o| {
        dw_o.iter_mut().for_each(|v| *v = 0.0);
        for b in 0..g.batch {
            let d_row = &dout[(b * g.c_out + o) * h..(b * g.c_out + o + 1) * h];
            for i in 0..g.c_in {
                let x_row = &x[(b * g.c_in + i) * h..(b * g.c_in + i + 1) * h];
                for t in 0..g.kernel {
                    let (lo, hi, d) = g.tap_range(t);
                    let src = &x_row[(lo as isize + d) as usize..(hi as isize + d) as usize];
                    dw_o[i * g.kernel + t] += dot(&d_row[lo..hi], src);
                }
            }
        }
    });
}

/// Dot product with four independent accumulators so the loop vectorizes;
/// the summation order is fixed, so results do not depend on threading.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gradient with respect to the bias; `db` is overwritten.
pub fn conv1d_backward_bias(g: ConvGeometry, dout: &[f64], db: &mut [f64]) {
    let h = g.len;
    for (o, v) in db.iter_mut().enumerate() {
        *v = (0..g.batch)
            .map(|b| dout[(b * g.c_out + o) * h..(b * g.c_out + o + 1) * h].iter().sum::<f64>())
            .sum();
    }
}
