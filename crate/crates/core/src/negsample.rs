//! Negative sampling from the unigram distribution raised to the 3/4 power.
//!
//! Draws are O(1) via a Walker–Vose alias table built over
//! `counts[i]^0.75 / Σ_j counts[j]^0.75`, with no table-size approximation:
//! the implied draw distribution matches the target exactly up to floating
//! rounding.

use rand::Rng;
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::CodeId;

const POWER: f64 = 0.75;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("cannot build a sampler over an empty vocabulary")]
    EmptyVocabulary,
    #[error("cannot draw a negative distinct from the target in a single-code vocabulary")]
    NoAlternative,
}

/// Alias-table sampler over code ids.
#[derive(Debug, Clone)]
pub struct NegSampler {
    /// Probability of keeping slot i's own index rather than its alias.
    threshold: Vec<f64>,
    alias: Vec<CodeId>,
    /// The exact target distribution, kept for inspection and tests.
    distribution: Vec<f64>,
}

impl NegSampler {
    /// Build from a vocabulary's raw counts.
    pub fn from_vocab(vocab: &Vocabulary) -> Result<Self, SamplerError> {
        Self::from_weights(vocab.counts().iter().map(|&c| (c as f64).powf(POWER)))
    }

    /// Build from arbitrary non-negative weights (already exponentiated).
    pub fn from_weights(weights: impl IntoIterator<Item = f64>) -> Result<Self, SamplerError> {
        let weights: Vec<f64> = weights.into_iter().collect();
        let norm: f64 = weights.iter().sum();
        if weights.is_empty() || norm <= 0.0 {
            return Err(SamplerError::EmptyVocabulary);
        }
        let n = weights.len();
        let distribution: Vec<f64> = weights.iter().map(|w| w / norm).collect();

        // Walker-Vose construction: pair each under-full slot with an
        // over-full donor until all slots hold exactly 1/n of mass.
        let mut threshold: Vec<f64> = distribution.iter().map(|p| p * n as f64).collect();
        let mut alias: Vec<CodeId> = (0..n as CodeId).collect();
        let mut small: Vec<usize> = Vec::new();
        let mut large: Vec<usize> = Vec::new();
        for (i, &t) in threshold.iter().enumerate() {
            if t < 1.0 {
                small.push(i);
            } else {
                large.push(i);
            }
        }
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            alias[s] = l as CodeId;
            threshold[l] -= 1.0 - threshold[s];
            if threshold[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // Leftovers of either kind sit at (numerically) exactly 1.0.
        for &i in small.iter().chain(large.iter()) {
            threshold[i] = 1.0;
        }

        Ok(NegSampler {
            threshold,
            alias,
            distribution,
        })
    }

    pub fn len(&self) -> usize {
        self.distribution.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distribution.is_empty()
    }

    /// The exact probability the sampler targets for `code`.
    pub fn probability(&self, code: CodeId) -> f64 {
        self.distribution[code as usize]
    }

    /// The probability implied by the alias table itself. Equals
    /// [`NegSampler::probability`] up to floating rounding; exposed so
    /// tests can check the construction rather than sample it.
    pub fn implied_probability(&self, code: CodeId) -> f64 {
        let n = self.len() as f64;
        let own = self.threshold[code as usize];
        let donated: f64 = self
            .threshold
            .iter()
            .zip(&self.alias)
            .filter(|&(_, &a)| a == code)
            .map(|(&t, _)| 1.0 - t)
            .sum();
        (own + donated) / n
    }

    /// Draw one code in O(1).
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> CodeId {
        let slot = rng.random_range(0..self.len());
        let coin: f64 = rng.random();
        if coin < self.threshold[slot] {
            slot as CodeId
        } else {
            self.alias[slot]
        }
    }

    /// Draw one code distinct from `exclude`, redrawing on collision.
    pub fn draw_excluding<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        exclude: CodeId,
    ) -> Result<CodeId, SamplerError> {
        if self.len() < 2 {
            return Err(SamplerError::NoAlternative);
        }
        loop {
            let code = self.draw(rng);
            if code != exclude {
                return Ok(code);
            }
        }
    }
}
