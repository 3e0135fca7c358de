use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Token;

/// Tolerance on the total mass of a distribution.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// A probability vector over the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(probs, MASS_TOLERANCE)
    }

    /// Validates with a caller-chosen tolerance on the total mass.
    /// The vector is stored as given (no renormalization).
    pub fn with_tolerance(probs: Vec<f64>, tolerance: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entry {i} is {} (must be finite and non-negative)",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > tolerance {
            return Err(Error::InvalidDistribution(format!("mass {total} is not 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0);
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, index: Token) -> Self {
        let mut probs = vec![0.0; n];
        probs[index as usize] = 1.0;
        Self(probs)
    }

    /// Numerically stable softmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prob(&self, token: Token) -> f64 {
        self.0[token as usize]
    }

    /// Most likely token; ties go to the lowest id.
    pub fn argmax(&self) -> Token {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best as Token
    }

    /// Inverse-CDF lookup for `u` in `[0, 1)`.
    pub fn quantile(&self, u: f64) -> Token {
        let mut cumulative = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > 0.0 {
                cumulative += p;
                last_positive = i;
                if u < cumulative {
                    return i as Token;
                }
            }
        }
        // Rounding left u above the accumulated mass.
        last_positive as Token
    }

    /// Draws one token, consuming exactly one uniform from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Token {
        self.quantile(rng.gen::<f64>())
    }

    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    /// Total variation distance, half the L1 distance.
    pub fn tv_distance(&self, other: &Distribution) -> f64 {
        assert_eq!(self.len(), other.len());
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}
