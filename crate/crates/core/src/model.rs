//! The language-model interface every backend implements, and the per-stream state
//! it operates on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::LogitVector;
use crate::tree::TreeBatch;
use crate::vocab::TokenId;

/// Bytes of parameters streamed through compute per forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCost {
    pub param_bytes: u64,
}

impl ModelCost {
    pub const FREE: ModelCost = ModelCost { param_bytes: 0 };
}

/// Keys and values for one transformer layer, row-major `[rows, width]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerKv {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

/// Per-layer key/value rows. Table models keep this empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvCache {
    layers: Vec<LayerKv>,
    width: usize,
    len: usize,
}

impl KvCache {
    pub fn new(num_layers: usize, width: usize) -> Self {
        KvCache { layers: vec![LayerKv::default(); num_layers], width, len: 0 }
    }

    pub fn with_capacity(num_layers: usize, width: usize, rows: usize) -> Self {
        let layer = LayerKv {
            keys: Vec::with_capacity(rows * width),
            values: Vec::with_capacity(rows * width),
        };
        KvCache { layers: vec![layer; num_layers], width, len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    /// Append one row to layer `l`. Rows must be pushed to every layer before
    /// [`KvCache::finish_row`] is called.
    pub fn push_layer_row(&mut self, l: usize, key: &[f32], value: &[f32]) {
        debug_assert_eq!(key.len(), self.width);
        self.layers[l].keys.extend_from_slice(key);
        self.layers[l].values.extend_from_slice(value);
    }

    pub fn finish_row(&mut self) {
        self.len += 1;
        debug_assert!(self.layers.iter().all(|l| l.keys.len() == self.len * self.width));
    }

    pub(crate) fn replace_layers(&mut self, layers: Vec<LayerKv>, len: usize) {
        self.layers = layers;
        self.len = len;
    }

    /// Copy row `row` of `other` onto the end of this cache.
    pub fn append_row_from(&mut self, other: &KvCache, row: usize) {
        let w = self.width;
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.keys.extend_from_slice(&src.keys[row * w..(row + 1) * w]);
            dst.values.extend_from_slice(&src.values[row * w..(row + 1) * w]);
        }
        self.len += 1;
    }
}

/// Scratch results of the most recent [`LanguageModel::decode_tree`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct Scratch {
    pub batch: TreeBatch,
    pub cache: KvCache,
    pub logits: Vec<LogitVector>,
}

/// Persistent prefix cache plus the scratch slab of the in-flight batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelState {
    tokens: Vec<TokenId>,
    cache: KvCache,
    scratch: Option<Scratch>,
    last_logits: Option<LogitVector>,
}

impl ModelState {
    pub fn new(cache: KvCache) -> Self {
        ModelState { tokens: Vec::new(), cache, scratch: None, last_logits: None }
    }

    /// Number of cached tokens.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn scratch(&self) -> Option<&Scratch> {
        self.scratch.as_ref()
    }

    /// Logits following the last cached token, if any have been produced.
    pub fn last_logits(&self) -> Option<&LogitVector> {
        self.last_logits.as_ref()
    }

    /// Up to `n` most recent tokens of the cached prefix followed by the batch path
    /// ending at `node`.
    pub fn context_suffix(&self, batch: &TreeBatch, node: usize, n: usize) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = Vec::with_capacity(n);
        let mut cur = Some(node);
        while let Some(i) = cur {
            if out.len() == n {
                break;
            }
            out.push(batch.tokens()[i]);
            cur = batch.parents()[i];
        }
        let mut rest = self.tokens.iter().rev();
        while out.len() < n {
            match rest.next() {
                Some(&t) => out.push(t),
                None => break,
            }
        }
        out.reverse();
        out
    }

    pub(crate) fn store_scratch(&mut self, scratch: Scratch) {
        self.scratch = Some(scratch);
    }

    /// Append a single token whose cache row and logits were computed outside a batch.
    pub(crate) fn push_token(&mut self, token: TokenId, logits: LogitVector) {
        self.tokens.push(token);
        self.last_logits = Some(logits);
        self.scratch = None;
    }

    /// Replace the logits of the in-flight batch (used by wrappers that transform a
    /// base model's outputs).
    pub(crate) fn remap_scratch_logits(&mut self, logits: Vec<LogitVector>) {
        if let Some(s) = self.scratch.as_mut() {
            s.logits = logits;
        }
    }

    pub(crate) fn cache_mut(&mut self) -> &mut KvCache {
        &mut self.cache
    }

    /// Drop the scratch slab without committing anything.
    pub fn discard(&mut self) {
        self.scratch = None;
    }

    /// Append the scratch rows of `nodes` (a root-to-node chain of the last batch) to
    /// the persistent cache and drop the rest of the scratch slab.
    pub fn commit_chain(&mut self, nodes: &[usize]) -> Result<()> {
        if nodes.is_empty() {
            self.scratch = None;
            return Ok(());
        }
        let scratch = self
            .scratch
            .take()
            .ok_or_else(|| Error::InvalidCommit("no decoded batch to commit from".into()))?;
        if let Err(e) = scratch.batch.check_chain(nodes) {
            self.scratch = Some(scratch);
            return Err(e);
        }
        for &node in nodes {
            self.tokens.push(scratch.batch.tokens()[node]);
            if self.cache.num_layers() > 0 {
                self.cache.append_row_from(&scratch.cache, node);
            }
        }
        let last = *nodes.last().expect("non-empty");
        self.last_logits = Some(scratch.logits[last].clone());
        Ok(())
    }
}

/// A next-token model that can score tree-structured batches against a cached prefix.
///
/// Models are immutable once built; all per-sequence data lives in [`ModelState`].
pub trait LanguageModel: Send + Sync {
    fn name(&self) -> String;

    fn vocab_size(&self) -> usize;

    fn max_context(&self) -> usize;

    fn cost(&self) -> ModelCost;

    /// State with an empty prefix.
    fn new_state(&self) -> ModelState;

    /// Run `tokens` through the model, caching all of them.
    fn prefill(&self, tokens: &[TokenId]) -> Result<ModelState> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("prefill needs at least one token".into()));
        }
        if tokens.len() > self.max_context() {
            return Err(Error::ContextOverflow {
                position: tokens.len() - 1,
                max_context: self.max_context(),
            });
        }
        let mut state = self.new_state();
        let batch = TreeBatch::chain(tokens.to_vec(), 0)?;
        self.decode_tree(&mut state, &batch)?;
        let all: Vec<usize> = (0..tokens.len()).collect();
        self.commit(&mut state, &all)?;
        Ok(state)
    }

    /// Logits for every node of `batch`. The persistent cache is left unchanged; the
    /// batch's own cache rows are kept as scratch until [`LanguageModel::commit`].
    fn decode_tree(&self, state: &mut ModelState, batch: &TreeBatch) -> Result<Vec<LogitVector>>;

    /// Move the scratch rows of a root-to-node chain into the persistent cache.
    fn commit(&self, state: &mut ModelState, nodes: &[usize]) -> Result<()> {
        state.commit_chain(nodes)
    }
}

impl std::fmt::Debug for dyn LanguageModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// Shared checks every backend runs before decoding a batch.
pub fn check_batch(model: &dyn LanguageModel, state: &ModelState, batch: &TreeBatch) -> Result<()> {
    batch.check_prefix(state.len())?;
    let vocab = model.vocab_size();
    if let Some(t) = batch.tokens().iter().find(|t| t.index() >= vocab) {
        return Err(Error::InvalidBatch(format!("token {t} outside vocabulary of {vocab}")));
    }
    if let Some(&pos) = batch.positions().iter().max() {
        if pos >= model.max_context() {
            return Err(Error::ContextOverflow { position: pos, max_context: model.max_context() });
        }
    }
    Ok(())
}
