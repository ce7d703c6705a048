//! Random speculative trees and checks of the transformer's tree attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::transformer::{AttentionTrace, Transformer};
use crate::tree::{tree_mask, SpecTree, StageTag, TreeBatch};
use crate::vocab::TokenId;

/// A tree of up to `max_nodes` nodes (root included) and depth at most `max_depth`,
/// with tokens drawn uniformly from `0..vocab_size`. Siblings never share a token.
pub fn random_tree(rng: &mut impl Rng, max_nodes: usize, max_depth: usize, vocab_size: usize) -> SpecTree {
    let mut tree = SpecTree::new(TokenId(rng.random_range(0..vocab_size as u32)));
    let target = rng.random_range(1..=max_nodes.max(1));
    let mut attempts = 0;
    while tree.len() < target && attempts < 20 * max_nodes {
        attempts += 1;
        let open: Vec<usize> = (0..tree.len()).filter(|&i| tree.node(i).depth < max_depth).collect();
        let Some(&parent) = open.get(rng.random_range(0..open.len().max(1))) else {
            break;
        };
        let token = TokenId(rng.random_range(0..vocab_size as u32));
        if tree.child_with_token(parent, token).is_none() {
            tree.add_candidate(parent, token, 0.0, StageTag::Draft);
        }
    }
    tree
}

/// Largest absolute difference between the tree-batch logits of every node and the
/// logits of replaying its root-to-node path one token at a time after `prefix`.
pub fn tree_sequential_max_diff(model: &Transformer, prefix: &[TokenId], tree: &SpecTree) -> Result<f64> {
    let base = if prefix.is_empty() { model.new_state() } else { model.prefill(prefix)? };
    let batch = tree_mask(tree, prefix.len())?;
    let mut state = base.clone();
    let tree_logits = model.decode_tree(&mut state, &batch)?;
    let mut worst = 0.0f64;
    for (i, logits) in tree_logits.iter().enumerate() {
        let mut s = base.clone();
        let mut last = None;
        for t in tree.path_tokens(i) {
            last = Some(model.forward_sequential(&mut s, t)?);
        }
        let seq = last.ok_or_else(|| Error::Internal("empty path".into()))?;
        for (a, b) in logits.values().iter().zip(seq.values()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Number of (layer, head, query, key) entries where a non-ancestor key got a
/// finite score or a non-zero attention weight.
pub fn mask_violations(trace: &AttentionTrace, batch: &TreeBatch) -> usize {
    let n = batch.len();
    let mut bad = 0;
    for (scores, weights) in trace.scores.iter().zip(&trace.weights) {
        for (s, w) in scores.iter().zip(weights) {
            for i in 0..n {
                for j in 0..n {
                    let k = i * n + j;
                    if !batch.attends(i, j) && (s[k] != f32::NEG_INFINITY || w[k] != 0.0) {
                        bad += 1;
                    }
                }
            }
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_trees_respect_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = random_tree(&mut rng, 16, 6, 10);
            assert!(t.len() <= 16);
            assert!(t.max_depth() <= 6);
            t.validate().unwrap();
        }
    }
}
