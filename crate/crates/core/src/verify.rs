//! Self-checks runnable from the command line: exact distribution preservation,
//! tree attention against sequential decoding, and n-gram model sanity.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::Method;
use crate::error::{Error, Result};
use crate::harness::{mask_violations, random_tree, tree_sequential_max_diff, ExactnessInstance, TableModel};
use crate::model::{LanguageModel, ModelCost};
use crate::ngram::{make_corpus, KatzTrigram};
use crate::transformer::{Transformer, TransformerConfig};
use crate::tree::tree_mask;
use crate::vocab::{TokenId, Vocab};

/// Maximum total variation tolerated between enumerated and target marginals.
pub const EXACTNESS_TV: f64 = 1e-9;
/// Maximum absolute logit difference between tree and sequential decoding.
pub const TREE_TOLERANCE: f64 = 1e-4;
/// Tolerated deviation of a conditional distribution's mass from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Exactness,
    Tree,
    Ngram,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exactness" => Ok(Suite::Exactness),
            "tree" => Ok(Suite::Tree),
            "ngram" => Ok(Suite::Ngram),
            "all" => Ok(Suite::All),
            other => Err(Error::InvalidArgument(format!("unknown suite {other:?}"))),
        }
    }
}

/// Result of one suite: how many checks ran and a line per failure.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {} checks, {} failed", self.name, self.checks, self.failures.len())?;
        for line in &self.failures {
            write!(f, "\n  {line}")?;
        }
        Ok(())
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(match suite {
        Suite::Exactness => vec![exactness(seed)?],
        Suite::Tree => vec![tree(seed)?],
        Suite::Ngram => vec![ngram(seed)?],
        Suite::All => vec![exactness(seed)?, tree(seed)?, ngram(seed)?],
    })
}

/// Enumerate one step of staged and speculative decoding on 20 random table
/// instances and compare the first-token marginal with the warped oracle.
pub fn exactness(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport { name: "exactness", checks: 0, failures: Vec::new() };
    for i in 0..20 {
        let inst = ExactnessInstance::random(seed.wrapping_add(i))?;
        for method in [Method::Staged, Method::Speculative] {
            let c = inst.check(method, 2_000_000)?;
            report.checks += 1;
            if (c.total - 1.0).abs() > 1e-12 || c.tv > EXACTNESS_TV {
                report.failures.push(format!(
                    "instance {i} {method}: total {:.3e}, tv {:.3e}, config {:?}",
                    c.total, c.tv, inst.config
                ));
            }
        }
    }
    Ok(report)
}

/// 100 random trees over a seeded 4-layer transformer.
pub fn tree(seed: u64) -> Result<SuiteReport> {
    let config = TransformerConfig { layers: 4, heads: 4, dim: 64, max_context: 64, vocab_size: 258 };
    let model = Transformer::init_random(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport { name: "tree", checks: 0, failures: Vec::new() };
    for i in 0..100 {
        let tree = random_tree(&mut rng, 16, 6, config.vocab_size);
        let prefix: Vec<TokenId> =
            (0..rng.random_range(0..8)).map(|_| TokenId(rng.random_range(0..258))).collect();
        let diff = tree_sequential_max_diff(&model, &prefix, &tree)?;
        let mut state = if prefix.is_empty() { model.new_state() } else { model.prefill(&prefix)? };
        let batch = tree_mask(&tree, prefix.len())?;
        let (_, trace) = model.forward_tree_traced(&mut state, &batch)?;
        let leaks = mask_violations(&trace, &batch);
        report.checks += 1;
        if diff > TREE_TOLERANCE || leaks > 0 {
            report.failures.push(format!("tree {i} ({} nodes): max diff {diff:.3e}, {leaks} mask leaks", tree.len()));
        }
    }
    Ok(report)
}

/// Train a trigram on text sampled from a random table model and check
/// normalization, perplexity ordering and a serialization round trip.
pub fn ngram(seed: u64) -> Result<SuiteReport> {
    let vocab = Vocab { size: 8, bos: Some(TokenId(7)), eos: None };
    let source = TableModel::random(vocab.size, 2, 0.3, seed, ModelCost::FREE)?;
    let train = make_corpus(&source, vocab, 1.0, 20_000, 64, &[], seed)?;
    let held_out = make_corpus(&source, vocab, 1.0, 5_000, 64, &[], seed ^ 0x5eed)?;
    let model = KatzTrigram::train(&train, vocab, 5)?;
    let mut report = SuiteReport { name: "ngram", checks: 0, failures: Vec::new() };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let u = TokenId(rng.random_range(0..vocab.size as u32));
        let v = TokenId(rng.random_range(0..vocab.size as u32));
        let mass: f64 = model.dist(u, v).values().iter().sum();
        report.checks += 1;
        if (mass - 1.0).abs() > NORMALIZATION_TOLERANCE {
            report.failures.push(format!("context ({u}, {v}) sums to {mass}"));
        }
    }

    let katz = model.perplexity(&held_out);
    let unigram = crate::ngram::unigram_perplexity(&train, &held_out, vocab)?;
    let uniform = (vocab.size - 1) as f64;
    report.checks += 1;
    if !(katz < unigram && unigram < uniform) {
        report.failures.push(format!("perplexity order violated: katz {katz}, unigram {unigram}, uniform {uniform}"));
    }

    let bytes = model.to_bytes();
    let reloaded = KatzTrigram::from_bytes(&bytes)?;
    report.checks += 1;
    if reloaded.to_bytes() != bytes || reloaded.counts() != model.counts() {
        report.failures.push("save/load round trip changed the model".into());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn ngram_suite_passes() {
        let r = ngram(3).unwrap();
        assert!(r.passed(), "{r}");
    }
}
