//! Probability distributions over the vocabulary.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;

/// Tolerance on the total mass of a valid distribution.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A non-negative vector summing to 1 (within [`SUM_TOLERANCE`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let mut sum = 0.0;
        for &p in &probs {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(CoreError::InvalidParameter { what: "probability entry", value: p });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(CoreError::InvalidParameter { what: "probability mass", value: sum });
        }
        Ok(Distribution(probs))
    }

    /// Wraps a vector that is valid by construction (e.g. a softmax output).
    pub(crate) fn new_unchecked(probs: Vec<f64>) -> Self {
        Distribution(probs)
    }

    pub fn uniform(n: usize) -> Self {
        Distribution(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut p = vec![0.0; n];
        p[index] = 1.0;
        Distribution(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prob(&self, id: u32) -> f64 {
        self.0[id as usize]
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// KL(p ‖ q) with the target-floor convention: entries of `q` below `floor`
/// contribute 0 (the 0·log 0 reading), as do zero entries of `p`.
pub fn kl_divergence(p: &[f64], q: &[f64], floor: f64) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut s = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 && qi >= floor {
            s += pi * (math::ln(pi) - math::ln(qi));
        }
    }
    s
}

/// Clamp entries of a target distribution to at least `floor`, then
/// renormalize so the forward KL objective stays finite and non-negative.
pub fn clamp_target(target: &Distribution, floor: f64) -> Distribution {
    let mut v: Vec<f64> = target.probs().iter().map(|&p| p.max(floor)).collect();
    let sum: f64 = v.iter().sum();
    v.iter_mut().for_each(|p| *p /= sum);
    Distribution(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_negative_and_unnormalized() {
        assert!(Distribution::new(vec![0.5, 0.5]).is_ok());
        assert!(Distribution::new(vec![-0.1, 1.1]).is_err());
        assert!(Distribution::new(vec![0.6, 0.6]).is_err());
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert!(kl_divergence(&p, &p, 1e-12).abs() < 1e-10);
    }

    #[test]
    fn kl_is_nonnegative_on_valid_pairs() {
        let p = [0.1, 0.2, 0.7];
        let q = [0.3, 0.3, 0.4];
        assert!(kl_divergence(&p, &q, 1e-12) >= 0.0);
    }

    #[test]
    fn clamp_keeps_distribution_valid() {
        let p = Distribution::new(vec![0.0, 1.0]).unwrap();
        let c = clamp_target(&p, 1e-12);
        let sum: f64 = c.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
        assert!(c.probs()[0] > 0.0);
    }
}
