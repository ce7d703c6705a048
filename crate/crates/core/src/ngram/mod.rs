//! Katz backoff trigram model.
//!
//! The corpus is split into segments at BOS tokens; each segment is padded with two
//! BOS tokens so every position has a full trigram context. BOS is never predicted.
//! Observed counts below `k_threshold` are discounted with Good-Turing estimates
//! (falling back to an absolute discount of 0.5 where those are undefined) and the
//! freed mass is handed to the next lower order through backoff weights. A context
//! whose counts are all at or above the threshold would free no mass at all; its
//! counts take the absolute discount instead, unless the threshold is 1 (no
//! discounting anywhere).

mod io;

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_batch, KvCache, LanguageModel, ModelCost, ModelState, Scratch};
use crate::rng::RandomStream;
use crate::sampling::{softmax, LogitVector, ProbVector};
use crate::tree::TreeBatch;
use crate::vocab::{TokenId, Vocab};

pub use io::{KATZ_MAGIC, KATZ_VERSION};

/// Default count threshold above which counts are left undiscounted.
pub const DEFAULT_K_THRESHOLD: u32 = 5;

/// Absolute discount used where Good-Turing is undefined.
pub const FALLBACK_DELTA: f64 = 0.5;

/// Leftover mass at or below which a context counts as having none. With
/// discounting enabled, such contexts (every count at or above the threshold) take
/// the absolute discount on all counts so unseen continuations keep non-zero
/// probability.
const ZERO_LEFTOVER: f64 = 1e-12;

/// Raw n-gram counts of a BOS-padded corpus.
///
/// Trigrams and unigrams are counted at every predicted position. Bigrams are counted
/// at every adjacent pair of the padded segment, so a trigram's two-token prefix is
/// always counted at least as often as the trigram.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NgramCounts {
    pub trigrams: BTreeMap<[u32; 3], u64>,
    pub bigrams: BTreeMap<[u32; 2], u64>,
    pub unigrams: BTreeMap<u32, u64>,
    /// Number of predicted (non-padding) positions.
    pub total: u64,
}

impl NgramCounts {
    pub fn from_corpus(corpus: &[TokenId], bos: TokenId) -> Self {
        let mut counts = NgramCounts::default();
        for segment in corpus.split(|&t| t == bos) {
            if segment.is_empty() {
                continue;
            }
            let padded: Vec<u32> =
                [bos.0, bos.0].into_iter().chain(segment.iter().map(|t| t.0)).collect();
            for i in 1..padded.len() {
                *counts.bigrams.entry([padded[i - 1], padded[i]]).or_default() += 1;
                if i >= 2 {
                    *counts.trigrams.entry([padded[i - 2], padded[i - 1], padded[i]]).or_default() += 1;
                    *counts.unigrams.entry(padded[i]).or_default() += 1;
                    counts.total += 1;
                }
            }
        }
        counts
    }

    pub fn trigram(&self, a: TokenId, b: TokenId, c: TokenId) -> u64 {
        self.trigrams.get(&[a.0, b.0, c.0]).copied().unwrap_or(0)
    }

    pub fn bigram(&self, a: TokenId, b: TokenId) -> u64 {
        self.bigrams.get(&[a.0, b.0]).copied().unwrap_or(0)
    }

    pub fn unigram(&self, a: TokenId) -> u64 {
        self.unigrams.get(&a.0).copied().unwrap_or(0)
    }
}

/// Discount multipliers `d_r` for one n-gram order; `d_r = 1` for `r >= k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discounts {
    values: Vec<f64>,
}

impl Discounts {
    /// Good-Turing discounts from the count-of-counts of one order.
    pub fn good_turing<I: IntoIterator<Item = u64>>(counts: I, k: u32) -> Self {
        let k = k as usize;
        let mut n_r = vec![0u64; k + 2];
        for c in counts {
            if (c as usize) < n_r.len() {
                n_r[c as usize] += 1;
            }
        }
        let mut values = vec![1.0; k.max(1)];
        let r_star = if n_r[1] > 0 { (k + 1) as f64 * n_r[k + 1] as f64 / n_r[1] as f64 } else { f64::NAN };
        for r in 1..k {
            let fallback = (r as f64 - FALLBACK_DELTA) / r as f64;
            let d = if n_r[r] > 0 && n_r[r + 1] > 0 && n_r[1] > 0 && 1.0 - r_star > 0.0 {
                let gt = (r + 1) as f64 * n_r[r + 1] as f64 / (r as f64 * n_r[r] as f64);
                (gt - r_star) / (1.0 - r_star)
            } else {
                f64::NAN
            };
            values[r] = if d > 0.0 && d <= 1.0 { d } else { fallback };
        }
        Discounts { values }
    }

    pub fn get(&self, r: u64) -> f64 {
        self.values.get(r as usize).copied().filter(|_| r >= 1).unwrap_or(1.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// False when the threshold is 1, which leaves every count undiscounted.
    pub fn enabled(&self) -> bool {
        self.values.len() > 1
    }
}

/// Trigram model with Katz backoff. Immutable after training.
#[derive(Debug)]
pub struct KatzTrigram {
    vocab: Vocab,
    k_threshold: u32,
    counts: NgramCounts,
    d3: Discounts,
    d2: Discounts,
    d1: Discounts,
    unigram: Vec<f64>,
    tri: HashMap<(u32, u32), Vec<(u32, u64)>>,
    bi: HashMap<u32, Vec<(u32, u64)>>,
    alpha: Mutex<HashMap<(u32, u32), f64>>,
}

impl KatzTrigram {
    /// Count and smooth `corpus` over a vocabulary that must define BOS.
    pub fn train(corpus: &[TokenId], vocab: Vocab, k_threshold: u32) -> Result<Self> {
        if corpus.len() < 3 {
            return Err(Error::InvalidCorpus(format!(
                "need at least 3 tokens, got {}",
                corpus.len()
            )));
        }
        let bos = vocab
            .bos
            .ok_or_else(|| Error::InvalidArgument("trigram vocabulary needs a BOS token".into()))?;
        if let Some(t) = corpus.iter().find(|t| !vocab.contains(**t)) {
            return Err(Error::InvalidCorpus(format!("token {t} outside vocabulary")));
        }
        Self::from_counts(NgramCounts::from_corpus(corpus, bos), vocab, k_threshold)
    }

    pub fn from_counts(counts: NgramCounts, vocab: Vocab, k_threshold: u32) -> Result<Self> {
        let bos = vocab
            .bos
            .ok_or_else(|| Error::InvalidArgument("trigram vocabulary needs a BOS token".into()))?;
        if k_threshold == 0 {
            return Err(Error::InvalidArgument("k_threshold must be at least 1".into()));
        }
        if counts.total == 0 {
            return Err(Error::InvalidCorpus("corpus has no predicted tokens".into()));
        }
        let mut tri: HashMap<(u32, u32), Vec<(u32, u64)>> = HashMap::new();
        for (&[a, b, c], &n) in &counts.trigrams {
            tri.entry((a, b)).or_default().push((c, n));
        }
        let mut bi: HashMap<u32, Vec<(u32, u64)>> = HashMap::new();
        for (&[a, b], &n) in &counts.bigrams {
            if b != bos.0 {
                bi.entry(a).or_default().push((b, n));
            }
        }
        let d3 = Discounts::good_turing(counts.trigrams.values().copied(), k_threshold);
        let d2 = Discounts::good_turing(bi.values().flatten().map(|&(_, n)| n), k_threshold);
        let d1 = Discounts::good_turing(counts.unigrams.values().copied(), k_threshold);

        let mut unigram = vec![0.0; vocab.size];
        let total = counts.total as f64;
        for (&w, &n) in &counts.unigrams {
            unigram[w as usize] = d1.get(n) * n as f64 / total;
        }
        let unseen: Vec<usize> = (0..vocab.size)
            .filter(|&w| w != bos.index() && !counts.unigrams.contains_key(&(w as u32)))
            .collect();
        if d1.enabled() && !unseen.is_empty() && 1.0 - unigram.iter().sum::<f64>() <= ZERO_LEFTOVER {
            for (&w, &n) in &counts.unigrams {
                unigram[w as usize] = (n as f64 - FALLBACK_DELTA) / total;
            }
        }
        let seen: f64 = unigram.iter().sum();
        if unseen.is_empty() {
            unigram.iter_mut().for_each(|p| *p /= seen);
        } else {
            let share = (1.0 - seen) / unseen.len() as f64;
            for w in unseen {
                unigram[w] = share;
            }
        }

        Ok(KatzTrigram {
            vocab,
            k_threshold,
            counts,
            d3,
            d2,
            d1,
            unigram,
            tri,
            bi,
            alpha: Mutex::new(HashMap::new()),
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn k_threshold(&self) -> u32 {
        self.k_threshold
    }

    pub fn counts(&self) -> &NgramCounts {
        &self.counts
    }

    pub fn discounts(&self) -> [&Discounts; 3] {
        [&self.d1, &self.d2, &self.d3]
    }

    fn bos(&self) -> TokenId {
        self.vocab.bos.expect("validated at construction")
    }

    /// Discounted unigram distribution (the end of every backoff chain).
    pub fn unigram_dist(&self) -> ProbVector {
        ProbVector::new(self.unigram.clone()).expect("unigram normalized at training")
    }

    /// Bigram-level Katz distribution `P(. | v)`.
    pub fn bigram_dist(&self, v: TokenId) -> Vec<f64> {
        match self.bi.get(&v.0) {
            None => self.unigram.clone(),
            Some(seen) => backoff(seen, &self.d2, &self.unigram, None),
        }
    }

    /// Full backoff distribution `P(. | u, v)`.
    pub fn dist(&self, u: TokenId, v: TokenId) -> ProbVector {
        let lower = self.bigram_dist(v);
        let values = match self.tri.get(&(u.0, v.0)) {
            None => lower,
            Some(seen) => {
                let cached = self.alpha.lock().expect("alpha cache").get(&(u.0, v.0)).copied();
                let mut alpha = cached;
                let out = backoff(seen, &self.d3, &lower, Some(&mut alpha));
                if cached.is_none() {
                    if let Some(a) = alpha {
                        self.alpha.lock().expect("alpha cache").insert((u.0, v.0), a);
                    }
                }
                out
            }
        };
        ProbVector::new(values).expect("Katz distribution normalized")
    }

    /// Distribution after `history`, using its last two tokens. Histories shorter than
    /// two tokens are left-padded with BOS.
    pub fn dist_after(&self, history: &[TokenId]) -> ProbVector {
        let (u, v) = self.context_of(history);
        self.dist(u, v)
    }

    fn context_of(&self, history: &[TokenId]) -> (TokenId, TokenId) {
        let bos = self.bos();
        let n = history.len();
        let v = if n >= 1 { history[n - 1] } else { bos };
        let u = if n >= 2 { history[n - 2] } else { bos };
        // a BOS inside the history starts a new segment
        if v == bos {
            (bos, bos)
        } else {
            (u, v)
        }
    }

    pub fn prob(&self, history: &[TokenId], w: TokenId) -> f64 {
        self.dist_after(history).prob(w)
    }

    /// Per-token perplexity over `corpus`, scored the way training counts it.
    pub fn perplexity(&self, corpus: &[TokenId]) -> f64 {
        let bos = self.bos();
        let mut log_sum = 0.0;
        let mut n = 0usize;
        for segment in corpus.split(|&t| t == bos) {
            let mut hist = vec![bos, bos];
            for &w in segment {
                log_sum -= self.prob(&hist, w).ln();
                n += 1;
                hist.push(w);
            }
        }
        (log_sum / n.max(1) as f64).exp()
    }
}

/// Perplexity on `held_out` of the maximum-likelihood unigram model of `train`,
/// scored over the same tokens as [`KatzTrigram::perplexity`]. Tokens unseen in
/// training make it infinite.
pub fn unigram_perplexity(train: &[TokenId], held_out: &[TokenId], vocab: Vocab) -> Result<f64> {
    let bos = vocab
        .bos
        .ok_or_else(|| Error::InvalidArgument("unigram baseline needs a BOS token".into()))?;
    let mut counts = vec![0u64; vocab.size];
    for &t in train.iter().filter(|&&t| t != bos) {
        counts[t.index()] += 1;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidCorpus("training corpus has no tokens besides BOS".into()));
    }
    let scored: Vec<TokenId> = held_out.iter().copied().filter(|&t| t != bos).collect();
    let log_sum: f64 = scored.iter().map(|t| -(counts[t.index()] as f64 / total as f64).ln()).sum();
    Ok((log_sum / scored.len().max(1) as f64).exp())
}

/// Katz backoff at one order: discounted seen continuations plus the leftover mass
/// spread over unseen ones in proportion to `lower`.
fn backoff(seen: &[(u32, u64)], d: &Discounts, lower: &[f64], alpha: Option<&mut Option<f64>>) -> Vec<f64> {
    let total: u64 = seen.iter().map(|&(_, n)| n).sum();
    let mut out = vec![0.0; lower.len()];
    let mut is_seen = vec![false; lower.len()];
    let mut mass = 0.0;
    for &(w, n) in seen {
        let p = d.get(n) * n as f64 / total as f64;
        out[w as usize] = p;
        is_seen[w as usize] = true;
        mass += p;
    }
    let unseen_lower: f64 = lower.iter().zip(&is_seen).filter(|(_, &s)| !s).map(|(p, _)| p).sum();
    if d.enabled() && unseen_lower > 0.0 && 1.0 - mass <= ZERO_LEFTOVER {
        // every count is at or above the threshold: discount them all by delta
        mass = 0.0;
        for &(w, n) in seen {
            let p = (n as f64 - FALLBACK_DELTA) / total as f64;
            out[w as usize] = p;
            mass += p;
        }
    }
    let a = match alpha {
        Some(slot) => *slot.get_or_insert_with(|| backoff_weight(1.0 - mass, unseen_lower)),
        None => backoff_weight(1.0 - mass, unseen_lower),
    };
    if unseen_lower > 0.0 {
        for ((p, &s), &q) in out.iter_mut().zip(&is_seen).zip(lower) {
            if !s {
                *p = a * q;
            }
        }
    } else {
        out.iter_mut().for_each(|p| *p /= mass);
    }
    out
}

fn backoff_weight(leftover: f64, unseen_lower: f64) -> f64 {
    if unseen_lower > 0.0 {
        leftover.max(0.0) / unseen_lower
    } else {
        0.0
    }
}

impl LanguageModel for KatzTrigram {
    fn name(&self) -> String {
        format!("katz-trigram(k={})", self.k_threshold)
    }

    fn vocab_size(&self) -> usize {
        self.vocab.size
    }

    fn max_context(&self) -> usize {
        usize::MAX
    }

    fn cost(&self) -> ModelCost {
        ModelCost::FREE
    }

    fn new_state(&self) -> ModelState {
        ModelState::new(KvCache::default())
    }

    fn decode_tree(&self, state: &mut ModelState, batch: &TreeBatch) -> Result<Vec<LogitVector>> {
        check_batch(self, state, batch)?;
        let logits: Vec<LogitVector> = (0..batch.len())
            .map(|i| {
                let ctx = state.context_suffix(batch, i, 2);
                LogitVector::from_probs(self.dist_after(&ctx).values())
            })
            .collect();
        state.store_scratch(Scratch { batch: batch.clone(), cache: KvCache::default(), logits: logits.clone() });
        Ok(logits)
    }
}

/// Sample a training corpus from `model` at `temperature`.
///
/// Segments start with BOS and run until EOS or the model's context (capped at
/// `segment_len`) is exhausted. Segment `i` draws from its own stream derived from
/// `seed`, so the result does not depend on the number of worker threads.
///
/// With non-empty `contexts`, segment `i` is conditioned on `contexts[i % n]` (a
/// BOS-led token sequence). Only its last two tokens are written to the corpus,
/// ahead of the sampled continuation, so the counts reflect the model's own text.
pub fn make_corpus(
    model: &dyn LanguageModel,
    vocab: Vocab,
    temperature: f64,
    num_tokens: usize,
    segment_len: usize,
    contexts: &[Vec<TokenId>],
    seed: u64,
) -> Result<Vec<TokenId>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    if num_tokens == 0 {
        return Err(Error::InvalidArgument("num_tokens must be positive".into()));
    }
    let bos = vocab
        .bos
        .ok_or_else(|| Error::InvalidArgument("corpus vocabulary needs a BOS token".into()))?;
    if let Some(c) = contexts.iter().find(|c| c.first() != Some(&bos) || c.iter().any(|t| !vocab.contains(*t))) {
        return Err(Error::InvalidArgument(format!(
            "corpus context of length {} must start with BOS and stay in the vocabulary",
            c.len()
        )));
    }
    let seg = segment_len.max(2);
    let per_batch = rayon::current_num_threads().max(1) * 4;
    let mut corpus = Vec::with_capacity(num_tokens + seg);
    let mut next = 0usize;
    while corpus.len() < num_tokens {
        let segments: Vec<Vec<TokenId>> = (next..next + per_batch)
            .into_par_iter()
            .map(|i| {
                let context = if contexts.is_empty() { &[bos][..] } else { &contexts[i % contexts.len()][..] };
                sample_segment(model, vocab, context, temperature, seg, seed, i)
            })
            .collect::<Result<_>>()?;
        next += per_batch;
        for s in segments {
            corpus.extend(s);
            if corpus.len() >= num_tokens {
                break;
            }
        }
    }
    corpus.truncate(num_tokens);
    Ok(corpus)
}

fn sample_segment(
    model: &dyn LanguageModel,
    vocab: Vocab,
    context: &[TokenId],
    temperature: f64,
    len: usize,
    seed: u64,
    index: usize,
) -> Result<Vec<TokenId>> {
    let bos = context[0];
    if context.len() >= model.max_context() {
        return Err(Error::ContextOverflow { position: context.len(), max_context: model.max_context() });
    }
    let mut rng = RandomStream::derived(seed, &format!("corpus-{index}"));
    let mut state = model.prefill(context)?;
    let mut out = vec![bos];
    out.extend(context[1..].iter().rev().take(2).rev());
    while out.len() < len {
        let logits = state.last_logits().expect("prefill produces logits");
        let mut probs = softmax(logits, temperature)?.into_values();
        probs[bos.index()] = 0.0;
        let probs = ProbVector::normalized(probs)?;
        let t = crate::rng::sample(&probs, &mut rng);
        out.push(t);
        if Some(t) == vocab.eos || out.len() == len || state.len() + 1 >= model.max_context() {
            break;
        }
        let batch = TreeBatch::chain(vec![t], state.len())?;
        model.decode_tree(&mut state, &batch)?;
        model.commit(&mut state, &[0])?;
    }
    Ok(out)
}
