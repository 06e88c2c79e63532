use crate::autodiff::permute_rows;
use crate::channel::NoiseStream;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stream id reserved for interleaver generation.
const INTERLEAVER_STREAM: u64 = 0x1a7e_0000_0000_0000;

/// Fixed permutation of block positions shared by encoder and decoder.
///
/// `interleave` maps `out[j] = x[perm[j]]`; `deinterleave` is its inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interleaver {
    perm: Vec<usize>,
    seed: u64,
}

impl Interleaver {
    /// Seeded Fisher–Yates shuffle of `0..len`.
    pub fn random(len: usize, seed: u64) -> Self {
        let mut rng = NoiseStream::new(seed, INTERLEAVER_STREAM);
        let mut perm: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            let j = ((rng.uniform() * (i + 1) as f64).ceil() as usize).clamp(1, i + 1) - 1;
            perm.swap(i, j);
        }
        Interleaver { perm, seed }
    }

    pub fn identity(len: usize) -> Self {
        Interleaver {
            perm: (0..len).collect(),
            seed: 0,
        }
    }

    /// Wraps an explicit permutation, rejecting anything that is not a bijection.
    pub fn from_perm(perm: Vec<usize>, seed: u64) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::InvalidArgument(format!(
                    "interleaver entry {} breaks the bijection",
                    p
                )));
            }
            seen[p] = true;
        }
        Ok(Interleaver { perm, seed })
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    fn apply(&self, x: &Tensor, inverse: bool) -> Result<Tensor> {
        let h = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("interleave", "scalar input"))?;
        if h != self.perm.len() {
            return Err(Error::shape(
                "interleave",
                format!("block length {} vs interleaver length {}", h, self.perm.len()),
            ));
        }
        let rows = x.len().checked_div(h).unwrap_or(0);
        Tensor::new(
            x.shape().to_vec(),
            permute_rows(x.data(), rows, h, &self.perm, inverse),
        )
    }

    /// Permutes the last axis: `out[.., j] = x[.., perm[j]]`.
    pub fn interleave(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, false)
    }

    pub fn deinterleave(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_index_example() {
        let iv = Interleaver::from_perm(vec![2, 0, 1], 0).unwrap();
        let x = Tensor::new(vec![1, 1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let y = iv.interleave(&x).unwrap();
        assert_eq!(y.data(), &[30.0, 10.0, 20.0]);
        assert_eq!(iv.deinterleave(&y).unwrap(), x);
    }

    #[test]
    fn identity_is_noop() {
        let x = Tensor::new(vec![2, 1, 4], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(Interleaver::identity(4).interleave(&x).unwrap(), x);
    }

    #[test]
    fn random_is_seeded_bijection() {
        let a = Interleaver::random(100, 5);
        let b = Interleaver::random(100, 5);
        let c = Interleaver::random(100, 6);
        assert_eq!(a, b);
        assert_ne!(a.perm(), c.perm());
        assert!(Interleaver::from_perm(a.perm().to_vec(), 5).is_ok());
    }

    #[test]
    fn rejects_non_bijections_and_bad_lengths() {
        assert!(Interleaver::from_perm(vec![0, 0, 1], 0).is_err());
        assert!(Interleaver::from_perm(vec![0, 3, 1], 0).is_err());
        let x = Tensor::zeros(&[1, 1, 5]);
        assert!(Interleaver::identity(4).interleave(&x).is_err());
    }
}
