//! Logit and probability vectors, softmax, policy warping and inverse-CDF sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Stand-in for a zero-probability logit. Finite so every logit vector stays finite;
/// `exp` of it relative to any realistic maximum is exactly zero.
pub const MASKED_LOGIT: f64 = -1.0e30;

/// Tolerance on the total mass of a [`ProbVector`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Unnormalized next-token scores over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty logit vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite logit at index {i}")));
        }
        Ok(LogitVector(values))
    }

    /// Log-probabilities as logits; zero probabilities map to [`MASKED_LOGIT`].
    pub fn from_probs(probs: &[f64]) -> Self {
        LogitVector(
            probs
                .iter()
                .map(|&p| if p > 0.0 { p.ln() } else { MASKED_LOGIT })
                .collect(),
        )
    }

    pub fn from_f32(values: &[f32]) -> Self {
        LogitVector(values.iter().map(|&v| v as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> TokenId {
        argmax(&self.0)
    }

    /// Gap between the largest and second-largest logit.
    pub fn top2_gap(&self) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &v in &self.0 {
            if v > best {
                second = best;
                best = v;
            } else if v > second {
                second = v;
            }
        }
        best - second
    }
}

/// A probability distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates non-negativity and total mass `1 ± 1e-6`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty probability vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "probability at index {i} is negative or non-finite"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("probabilities sum to {sum}")));
        }
        Ok(ProbVector(values))
    }

    /// Scale non-negative weights to unit mass. Fails if the total is zero.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::InvalidArgument(format!("cannot normalize weights with total {sum}")));
        }
        Ok(ProbVector(weights.into_iter().map(|w| w / sum).collect()))
    }

    pub fn point_mass(len: usize, t: TokenId) -> Self {
        let mut v = vec![0.0; len];
        v[t.index()] = 1.0;
        ProbVector(v)
    }

    pub fn uniform(len: usize) -> Self {
        ProbVector(vec![1.0 / len as f64; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn prob(&self, t: TokenId) -> f64 {
        self.0[t.index()]
    }

    pub fn argmax(&self) -> TokenId {
        argmax(&self.0)
    }

    /// Total variation distance to another distribution of the same length.
    pub fn total_variation(&self, other: &ProbVector) -> f64 {
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    /// Tokens ordered by descending probability, ties broken by ascending id.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut ids: Vec<usize> = (0..self.0.len()).collect();
        ids.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        ids.into_iter().map(|i| TokenId(i as u32)).collect()
    }
}

/// Index of the maximum value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    TokenId(best as u32)
}

/// How a next-token distribution is turned into the distribution actually sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SamplingPolicy {
    /// Point mass on the most likely token.
    Greedy,
    /// Keep the `k` most likely tokens after temperature scaling.
    Topk { k: usize, temperature: f64 },
}

impl SamplingPolicy {
    pub fn topk(k: usize, temperature: f64) -> Self {
        SamplingPolicy::Topk { k, temperature }
    }

    pub fn is_greedy(&self) -> bool {
        matches!(self, SamplingPolicy::Greedy)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match *self {
            SamplingPolicy::Greedy => Ok(()),
            SamplingPolicy::Topk { k, temperature } => {
                if k == 0 || k > vocab_size {
                    return Err(Error::InvalidArgument(format!(
                        "top-k must be in [1, {vocab_size}], got {k}"
                    )));
                }
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "temperature must be positive, got {temperature}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            SamplingPolicy::Greedy => "greedy".to_string(),
            SamplingPolicy::Topk { k, temperature } => format!("topk(k={k},T={temperature})"),
        }
    }
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &LogitVector, temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let values = logits.values();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = values.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    ProbVector::normalized(weights)
}

/// Apply a sampling policy to a distribution. Temperature acts before top-k truncation.
pub fn warp(probs: &ProbVector, policy: &SamplingPolicy) -> ProbVector {
    match *policy {
        SamplingPolicy::Greedy => ProbVector::point_mass(probs.len(), probs.argmax()),
        SamplingPolicy::Topk { k, temperature } => {
            let scaled = if temperature == 1.0 {
                probs.values().to_vec()
            } else {
                let logs: Vec<f64> = probs
                    .values()
                    .iter()
                    .map(|&p| if p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY })
                    .collect();
                let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                logs.iter().map(|&l| (l - max).exp()).collect()
            };
            truncate_top_k(scaled, k)
        }
    }
}

/// Apply a sampling policy directly to logits (temperature folded into the softmax).
pub fn warp_logits(logits: &LogitVector, policy: &SamplingPolicy) -> ProbVector {
    match *policy {
        SamplingPolicy::Greedy => ProbVector::point_mass(logits.len(), logits.argmax()),
        SamplingPolicy::Topk { k, temperature } => {
            let probs = softmax(logits, temperature).expect("policy temperature validated");
            truncate_top_k(probs.into_values(), k)
        }
    }
}

fn truncate_top_k(mut weights: Vec<f64>, k: usize) -> ProbVector {
    let k = k.min(weights.len());
    if k < weights.len() {
        let mut ids: Vec<usize> = (0..weights.len()).collect();
        ids.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        for &i in &ids[k..] {
            weights[i] = 0.0;
        }
    }
    ProbVector::normalized(weights).expect("top-k keeps positive mass")
}

/// Inverse-CDF sampling over ascending token id with a single uniform `u` in `[0, 1)`.
pub fn sample_with_uniform(probs: &ProbVector, u: f64) -> TokenId {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.values().iter().enumerate() {
        if p > 0.0 {
            cumulative += p;
            last_positive = i;
            if u < cumulative {
                return TokenId(i as u32);
            }
        }
    }
    // rounding left the CDF just short of 1
    TokenId(last_positive as u32)
}
