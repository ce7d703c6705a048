//! Models given by explicit conditional distribution tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{check_batch, KvCache, LanguageModel, ModelCost, ModelState, Scratch};
use crate::sampling::{LogitVector, ProbVector};
use crate::tree::TreeBatch;
use crate::vocab::TokenId;

/// Row sums must be this close to one.
pub const ROW_TOLERANCE: f64 = 1e-12;

/// Next-token distributions keyed by up to two preceding tokens.
///
/// Lookup uses the longest suffix of the history that has a row, so a table with an
/// empty-context row is defined everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    vocab_size: usize,
    rows: BTreeMap<Vec<TokenId>, ProbVector>,
    order: usize,
    cost: ModelCost,
    max_context: usize,
}

impl TableModel {
    pub fn new(vocab_size: usize, rows: BTreeMap<Vec<TokenId>, Vec<f64>>, cost: ModelCost) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidArgument("table vocabulary needs at least 2 tokens".into()));
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("table has no rows".into()));
        }
        let mut order = 0;
        let mut checked = BTreeMap::new();
        for (ctx, row) in rows {
            if ctx.len() > 2 {
                return Err(Error::InvalidArgument(format!("context {ctx:?} longer than 2 tokens")));
            }
            if let Some(t) = ctx.iter().find(|t| t.index() >= vocab_size) {
                return Err(Error::InvalidArgument(format!("context token {t} outside vocabulary")));
            }
            if row.len() != vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "row for {ctx:?} has {} entries, expected {vocab_size}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::InvalidArgument(format!("row for {ctx:?} is not a distribution (sum {sum})")));
            }
            order = order.max(ctx.len());
            checked.insert(ctx, ProbVector::new(row)?);
        }
        Ok(TableModel { vocab_size, rows: checked, order, cost, max_context: 1 << 20 })
    }

    /// Context-free model: the same distribution after every history.
    pub fn constant(probs: Vec<f64>, cost: ModelCost) -> Result<Self> {
        let vocab = probs.len();
        Self::new(vocab, BTreeMap::from([(Vec::new(), probs)]), cost)
    }

    /// Random table with a row for every context of length `0..=order`. Each entry is
    /// zeroed with probability `zero_prob` (at least one entry per row stays positive).
    pub fn random(vocab_size: usize, order: usize, zero_prob: f64, seed: u64, cost: ModelCost) -> Result<Self> {
        if order > 2 {
            return Err(Error::InvalidArgument("table order is at most 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = BTreeMap::new();
        let mut contexts: Vec<Vec<TokenId>> = vec![Vec::new()];
        for len in 1..=order {
            let prev: Vec<Vec<TokenId>> = contexts.iter().filter(|c| c.len() == len - 1).cloned().collect();
            for c in prev {
                for t in 0..vocab_size {
                    let mut n = c.clone();
                    n.push(TokenId(t as u32));
                    contexts.push(n);
                }
            }
        }
        for ctx in contexts {
            let mut w: Vec<f64> = (0..vocab_size)
                .map(|_| if rng.random::<f64>() < zero_prob { 0.0 } else { rng.random::<f64>() + 0.05 })
                .collect();
            if w.iter().all(|&x| x == 0.0) {
                w[rng.random_range(0..vocab_size)] = 1.0;
            }
            let sum: f64 = w.iter().sum();
            rows.insert(ctx, w.iter().map(|x| x / sum).collect());
        }
        Self::new(vocab_size, rows, cost)
    }

    pub fn with_max_context(mut self, max_context: usize) -> Self {
        self.max_context = max_context;
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn rows(&self) -> &BTreeMap<Vec<TokenId>, ProbVector> {
        &self.rows
    }

    /// Distribution after `history` (longest matching suffix).
    pub fn dist_after(&self, history: &[TokenId]) -> Result<&ProbVector> {
        let n = history.len().min(self.order);
        (0..=n)
            .rev()
            .find_map(|len| self.rows.get(&history[history.len() - len..]))
            .ok_or_else(|| Error::InvalidArgument(format!("no table row matches history {history:?}")))
    }

    /// Parse lines of `context tokens : p0 p1 ... pV-1`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str, cost: ModelCost) -> Result<Self> {
        let mut rows = BTreeMap::new();
        let mut vocab = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::InvalidArgument(format!("line {}: {what}", lineno + 1));
            let (ctx, probs) = line.split_once(':').ok_or_else(|| bad("missing ':'"))?;
            let ctx: Vec<TokenId> = ctx
                .split_whitespace()
                .map(|s| s.parse::<u32>().map(TokenId).map_err(|_| bad("bad context token")))
                .collect::<Result<_>>()?;
            let probs: Vec<f64> = probs
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| bad("bad probability")))
                .collect::<Result<_>>()?;
            if *vocab.get_or_insert(probs.len()) != probs.len() {
                return Err(bad("row length differs from earlier rows"));
            }
            if rows.insert(ctx, probs).is_some() {
                return Err(bad("duplicate context"));
            }
        }
        Self::new(vocab.unwrap_or(0), rows, cost)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (ctx, row) in &self.rows {
            let ctx: Vec<String> = ctx.iter().map(|t| t.to_string()).collect();
            let probs: Vec<String> = row.values().iter().map(|p| format!("{p:?}")).collect();
            writeln!(out, "{} : {}", ctx.join(" "), probs.join(" ")).unwrap();
        }
        out
    }
}

impl LanguageModel for TableModel {
    fn name(&self) -> String {
        format!("table(V={},order={})", self.vocab_size, self.order)
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn cost(&self) -> ModelCost {
        self.cost
    }

    fn new_state(&self) -> ModelState {
        ModelState::new(KvCache::default())
    }

    fn decode_tree(&self, state: &mut ModelState, batch: &TreeBatch) -> Result<Vec<LogitVector>> {
        check_batch(self, state, batch)?;
        let logits: Vec<LogitVector> = (0..batch.len())
            .map(|i| {
                let ctx = state.context_suffix(batch, i, self.order);
                self.dist_after(&ctx).map(|p| LogitVector::from_probs(p.values()))
            })
            .collect::<Result<_>>()?;
        state.store_scratch(Scratch { batch: batch.clone(), cache: KvCache::default(), logits: logits.clone() });
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let m = TableModel::random(4, 2, 0.2, 3, ModelCost { param_bytes: 10 }).unwrap();
        let back = TableModel::parse(&m.to_text(), ModelCost { param_bytes: 10 }).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_rows() {
        let c = ModelCost::FREE;
        assert!(TableModel::parse(": 0.5 0.6", c).is_err());
        assert!(TableModel::parse("0 : 0.5 0.5\n: 1 0 0", c).is_err());
        assert!(TableModel::parse("0 0 0 : 0.5 0.5", c).is_err());
        assert!(TableModel::parse("x : 0.5 0.5", c).is_err());
        assert!(TableModel::parse(": 0.5 0.5\n: 0.5 0.5", c).is_err());
    }

    #[test]
    fn longest_suffix_lookup() {
        let text = ": 0.5 0.5\n1 : 0 1\n0 1 : 1 0\n";
        let m = TableModel::parse(text, ModelCost::FREE).unwrap();
        assert_eq!(m.dist_after(&[]).unwrap().values(), &[0.5, 0.5]);
        assert_eq!(m.dist_after(&[1, 1].map(TokenId)).unwrap().values(), &[0.0, 1.0]);
        assert_eq!(m.dist_after(&[0, 1].map(TokenId)).unwrap().values(), &[1.0, 0.0]);
        assert_eq!(m.dist_after(&[0].map(TokenId)).unwrap().values(), &[0.5, 0.5]);
    }
}
