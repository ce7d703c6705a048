//! Drafts derived from an oracle by mixing in the uniform distribution.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelCost, ModelState};
use crate::sampling::{softmax, LogitVector};
use crate::tree::TreeBatch;

/// `(1 - lambda) * base + lambda * uniform`, reporting its own parameter cost.
///
/// The mixture shares the base model's weights, so it is a stand-in for a smaller
/// draft whose alignment with the oracle is controlled by a single knob.
#[derive(Clone)]
pub struct MixtureModel {
    base: Arc<dyn LanguageModel>,
    lambda: f64,
    cost: ModelCost,
}

impl std::fmt::Debug for MixtureModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MixtureModel")
            .field("base", &self.base.name())
            .field("lambda", &self.lambda)
            .field("cost", &self.cost)
            .finish()
    }
}

impl MixtureModel {
    pub fn new(base: Arc<dyn LanguageModel>, lambda: f64, cost: ModelCost) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!("lambda must be in [0, 1], got {lambda}")));
        }
        Ok(MixtureModel { base, lambda, cost })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn base(&self) -> &Arc<dyn LanguageModel> {
        &self.base
    }

    fn mix(&self, logits: &LogitVector) -> Result<LogitVector> {
        let p = softmax(logits, 1.0)?;
        let u = self.lambda / p.len() as f64;
        let mixed: Vec<f64> = p.values().iter().map(|&x| (1.0 - self.lambda) * x + u).collect();
        Ok(LogitVector::from_probs(&mixed))
    }
}

impl LanguageModel for MixtureModel {
    fn name(&self) -> String {
        format!("mixture(lambda={}, {})", self.lambda, self.base.name())
    }

    fn vocab_size(&self) -> usize {
        self.base.vocab_size()
    }

    fn max_context(&self) -> usize {
        self.base.max_context()
    }

    fn cost(&self) -> ModelCost {
        self.cost
    }

    fn new_state(&self) -> ModelState {
        self.base.new_state()
    }

    fn decode_tree(&self, state: &mut ModelState, batch: &TreeBatch) -> Result<Vec<LogitVector>> {
        let logits = self.base.decode_tree(state, batch)?;
        let mixed: Vec<LogitVector> = logits.iter().map(|l| self.mix(l)).collect::<Result<_>>()?;
        state.remap_scratch_logits(mixed.clone());
        Ok(mixed)
    }

    fn commit(&self, state: &mut ModelState, nodes: &[usize]) -> Result<()> {
        self.base.commit(state, nodes)
    }
}

/// An oracle and a mixture draft derived from it.
#[derive(Clone, Debug)]
pub struct AlignedPair {
    pub oracle: Arc<dyn LanguageModel>,
    pub draft: MixtureModel,
}

/// Build the draft `(1 - lambda) * oracle + lambda * uniform`.
pub fn make_aligned_pair(oracle: Arc<dyn LanguageModel>, lambda: f64, draft_cost: ModelCost) -> Result<AlignedPair> {
    let draft = MixtureModel::new(oracle.clone(), lambda, draft_cost)?;
    Ok(AlignedPair { oracle, draft })
}
