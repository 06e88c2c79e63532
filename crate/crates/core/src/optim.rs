//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment state for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// State sized for tensors of the given lengths.
    pub fn new(lr: f64, sizes: &[usize]) -> Result<Self> {
        check_lr(lr)?;
        Ok(Adam {
            lr,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        check_lr(lr)?;
        self.lr = lr;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape("adam", format!("tensor {} changed size", i)));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - BETA1.powf(t);
        let c2 = 1.0 - BETA2.powf(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m).zip(v) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Validation {
            key: "lr",
            msg: format!("learning rate must be positive, got {}", lr),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = Adam::new(0.1, &[2]).unwrap();
        let mut w = Tensor::vector(vec![1.0, -1.0]);
        opt.step(&mut [&mut w], &[&[0.5, -2.0]]).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::new(0.05, &[1]).unwrap();
        let mut w = Tensor::vector(vec![3.0]);
        for _ in 0..2000 {
            let g = 2.0 * (w.data()[0] - 1.0);
            opt.step(&mut [&mut w], &[&[g]]).unwrap();
        }
        assert!((w.data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_lr_and_sizes() {
        assert!(Adam::new(0.0, &[1]).is_err());
        assert!(Adam::new(-1e-3, &[1]).is_err());
        let mut opt = Adam::new(1e-3, &[2]).unwrap();
        let mut w = Tensor::vector(vec![0.0]);
        assert!(opt.step(&mut [&mut w], &[&[0.0]]).is_err());
    }
}
