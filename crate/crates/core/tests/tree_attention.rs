//! Tree-structured batches against token-by-token decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specdec::harness::{mask_violations, random_tree, tree_sequential_max_diff, TableModel};
use specdec::tree::tree_mask;
use specdec::{LanguageModel, ModelCost, TokenId, Transformer, TransformerConfig, TreeBatch};

const CONFIG: TransformerConfig = TransformerConfig { layers: 4, heads: 4, dim: 64, max_context: 96, vocab_size: 258 };

fn model(seed: u64) -> Transformer {
    Transformer::init_random(CONFIG, seed).unwrap()
}

fn random_prefix(rng: &mut ChaCha8Rng, max: usize) -> Vec<TokenId> {
    (0..rng.random_range(1..=max)).map(|_| TokenId(rng.random_range(0..256))).collect()
}

#[test]
fn every_node_matches_its_sequential_path() {
    let m = model(101);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..30 {
        let tree = random_tree(&mut rng, 16, 6, 258);
        let prefix = random_prefix(&mut rng, 10);
        let diff = tree_sequential_max_diff(&m, &prefix, &tree).unwrap();
        assert!(diff <= 1e-4, "max diff {diff}");
    }
}

#[test]
fn argmax_agrees_away_from_near_ties() {
    let m = model(102);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let tree = random_tree(&mut rng, 12, 5, 258);
        let prefix = random_prefix(&mut rng, 6);
        let base = m.prefill(&prefix).unwrap();
        let batch = tree_mask(&tree, prefix.len()).unwrap();
        let tree_logits = m.decode_tree(&mut base.clone(), &batch).unwrap();
        for (i, logits) in tree_logits.iter().enumerate() {
            let mut s = base.clone();
            let mut seq = None;
            for t in tree.path_tokens(i) {
                seq = Some(m.forward_sequential(&mut s, t).unwrap());
            }
            let seq = seq.unwrap();
            if seq.top2_gap() >= 1e-3 {
                assert_eq!(logits.argmax(), seq.argmax());
            }
        }
    }
}

#[test]
fn non_ancestor_scores_are_masked_out() {
    let m = model(103);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let tree = random_tree(&mut rng, 16, 6, 258);
        let prefix = random_prefix(&mut rng, 8);
        let mut state = m.prefill(&prefix).unwrap();
        let batch = tree_mask(&tree, prefix.len()).unwrap();
        let (_, trace) = m.forward_tree_traced(&mut state, &batch).unwrap();
        assert_eq!(mask_violations(&trace, &batch), 0);
    }
}

#[test]
fn commit_then_decode_matches_sequential() {
    let m = model(104);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let prefix = random_prefix(&mut rng, 8);
        let chain = random_prefix(&mut rng, 6);
        let next = TokenId(rng.random_range(0..256));

        let mut committed = m.prefill(&prefix).unwrap();
        let batch = TreeBatch::chain(chain.clone(), prefix.len()).unwrap();
        m.decode_tree(&mut committed, &batch).unwrap();
        let all: Vec<usize> = (0..chain.len()).collect();
        m.commit(&mut committed, &all).unwrap();
        let after_commit = m.forward_sequential(&mut committed, next).unwrap();

        let mut seq = m.prefill(&prefix).unwrap();
        for &t in &chain {
            m.forward_sequential(&mut seq, t).unwrap();
        }
        let after_seq = m.forward_sequential(&mut seq, next).unwrap();

        assert_eq!(committed.tokens(), seq.tokens());
        let diff = after_commit
            .values()
            .iter()
            .zip(after_seq.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-4, "max diff {diff}");
    }
}

#[test]
fn table_model_commit_is_structurally_identical_to_prefill() {
    let table = TableModel::random(6, 2, 0.2, 9, ModelCost::FREE).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let prefix: Vec<TokenId> = (0..rng.random_range(1..5)).map(|_| TokenId(rng.random_range(0..6))).collect();
        let chain: Vec<TokenId> = (0..rng.random_range(1..5)).map(|_| TokenId(rng.random_range(0..6))).collect();
        let mut state = table.prefill(&prefix).unwrap();
        let batch = TreeBatch::chain(chain.clone(), prefix.len()).unwrap();
        table.decode_tree(&mut state, &batch).unwrap();
        table.commit(&mut state, &(0..chain.len()).collect::<Vec<_>>()).unwrap();
        let full: Vec<TokenId> = prefix.iter().chain(&chain).copied().collect();
        assert_eq!(state, table.prefill(&full).unwrap());
    }
}

#[test]
fn decode_without_commit_keeps_cache_length() {
    let m = model(105);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let prefix = random_prefix(&mut rng, 8);
    let mut state = m.prefill(&prefix).unwrap();
    let before = state.len();
    let tree = random_tree(&mut rng, 16, 6, 258);
    m.decode_tree(&mut state, &tree_mask(&tree, prefix.len()).unwrap()).unwrap();
    assert_eq!(state.len(), before);
    state.discard();
    assert_eq!(state.len(), before);
}
