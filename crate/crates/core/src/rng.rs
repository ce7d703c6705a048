//! Deterministic randomness.
//!
//! All random decisions in the engine go through the [`Chance`] trait, which exposes
//! the two decision shapes the algorithms need: a biased coin and a categorical draw.
//! [`RandomStream`] implements it with one uniform per decision; the test harness
//! implements it by branching over every outcome.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::sampling::{sample_with_uniform, ProbVector};
use crate::vocab::TokenId;

/// Source of random decisions.
pub trait Chance {
    /// Returns `true` with probability `p` (clamped to `[0, 1]`).
    fn bernoulli(&mut self, p: f64) -> bool;
    /// Draws a token from `probs`.
    fn categorical(&mut self, probs: &ProbVector) -> TokenId;
}

/// Named sub-streams used by a decoding step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Draft-side sampling while building the speculative tree.
    TreeBuild,
    /// Acceptance coins for candidate tokens.
    Acceptance,
    /// Correction and bonus tokens drawn from (residual) oracle distributions.
    Fallback,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::TreeBuild => "tree-build",
            Role::Acceptance => "acceptance",
            Role::Fallback => "fallback",
        }
    }
}

/// Routes each [`Role`] to a [`Chance`] implementation.
pub trait Randomness {
    fn stream(&mut self, role: Role) -> &mut dyn Chance;
}

/// Seeded uniform stream; `position` counts the uniforms drawn so far.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    position: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        RandomStream { seed, position: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream identified by `(seed, label)`.
    pub fn derived(seed: u64, label: &str) -> Self {
        Self::new(derive_seed(seed, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// Uniform in `[0, 1)`.
    pub fn next_uniform(&mut self) -> f64 {
        self.position += 1;
        self.rng.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.position += 1;
        self.rng.random::<u64>()
    }
}

impl Chance for RandomStream {
    fn bernoulli(&mut self, p: f64) -> bool {
        self.next_uniform() < p
    }

    fn categorical(&mut self, probs: &ProbVector) -> TokenId {
        let u = self.next_uniform();
        sample_with_uniform(probs, u)
    }
}

/// Draw one token with a single uniform from `rng`.
pub fn sample(probs: &ProbVector, rng: &mut RandomStream) -> TokenId {
    rng.categorical(probs)
}

/// Stable 64-bit seed derivation from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(label.as_bytes())
        .finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// One [`RandomStream`] per [`Role`], all derived from a single seed.
#[derive(Debug, Clone)]
pub struct SeededRandomness {
    build: RandomStream,
    accept: RandomStream,
    fallback: RandomStream,
}

impl SeededRandomness {
    pub fn new(seed: u64) -> Self {
        SeededRandomness {
            build: RandomStream::derived(seed, Role::TreeBuild.label()),
            accept: RandomStream::derived(seed, Role::Acceptance.label()),
            fallback: RandomStream::derived(seed, Role::Fallback.label()),
        }
    }
}

impl Randomness for SeededRandomness {
    fn stream(&mut self, role: Role) -> &mut dyn Chance {
        match role {
            Role::TreeBuild => &mut self.build,
            Role::Acceptance => &mut self.accept,
            Role::Fallback => &mut self.fallback,
        }
    }
}
