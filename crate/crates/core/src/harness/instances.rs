//! Randomized small instances for exact distribution checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Engine, EngineConfig, Method};
use crate::error::Result;
use crate::harness::enumerate::{enumerate_step_distribution, to_f64, total_variation_exact};
use crate::harness::table::TableModel;
use crate::model::{LanguageModel, ModelCost};
use crate::sampling::{warp_logits, ProbVector, SamplingPolicy};
use crate::vocab::TokenId;

/// Vocabulary size of [`ExactnessInstance::random`].
pub const INSTANCE_VOCAB: usize = 4;

/// Oracle, draft and draft² tables with a tree configuration and prompt.
#[derive(Debug, Clone)]
pub struct ExactnessInstance {
    pub oracle: TableModel,
    pub draft: TableModel,
    pub draft2: TableModel,
    pub config: EngineConfig,
    pub prompt: Vec<TokenId>,
}

/// Outcome of enumerating one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactnessCheck {
    /// Total probability of all enumerated paths.
    pub total: f64,
    /// Total variation between the first-token marginal and the warped oracle.
    pub tv: f64,
}

impl ExactnessInstance {
    /// V=4 tables with some zero entries, budget 1..=4, 1..=3 children, depth
    /// 1..=3, draft² chains of 0..=2, top-k with k in 2..=4 and T in {0.7, 1, 1.5}.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = |b| ModelCost { param_bytes: b };
        let oracle = TableModel::random(INSTANCE_VOCAB, 2, 0.2, rng.random(), cost(100))?;
        let draft = TableModel::random(INSTANCE_VOCAB, rng.random_range(0..=2), 0.2, rng.random(), cost(10))?;
        let draft2 = TableModel::random(INSTANCE_VOCAB, 2, 0.1, rng.random(), ModelCost::FREE)?;
        let temps = [0.7, 1.0, 1.5];
        let config = EngineConfig {
            oracle_budget: rng.random_range(1..=4),
            max_children: rng.random_range(1..=3),
            max_depth: rng.random_range(1..=3),
            draft2_chain_len: rng.random_range(0..=2),
            policy: SamplingPolicy::topk(rng.random_range(2..=INSTANCE_VOCAB), temps[rng.random_range(0..3)]),
        };
        let prompt = (0..rng.random_range(1..=3))
            .map(|_| TokenId(rng.random_range(0..INSTANCE_VOCAB as u32)))
            .collect();
        Ok(ExactnessInstance { oracle, draft, draft2, config, prompt })
    }

    pub fn engine(&self, method: Method) -> Result<Engine<'_>> {
        Engine::new(method, self.config, &self.oracle, Some(&self.draft), Some(&self.draft2))
    }

    /// Warped oracle distribution of the first token after the prompt.
    pub fn target(&self) -> Result<ProbVector> {
        let state = self.oracle.prefill(&self.prompt)?;
        Ok(warp_logits(state.last_logits().expect("prefilled"), &self.config.policy))
    }

    /// Enumerate every random path of one engine step.
    pub fn check(&self, method: Method, max_runs: usize) -> Result<ExactnessCheck> {
        let (marginal, total) = enumerate_step_distribution(&self.engine(method)?, &self.prompt, max_runs)?;
        Ok(ExactnessCheck { total: to_f64(&total), tv: total_variation_exact(&marginal, &self.target()?) })
    }
}
