use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use specdec::benchmark::{bundled_prompts, corpus_contexts};
use specdec::harness::{random_tree, MixtureModel};
use specdec::ngram::make_corpus;
use specdec::transformer::InitOptions;
use specdec::tree::tree_mask;
use specdec::{
    Engine, EngineConfig, KatzTrigram, LanguageModel, Method, ModelCost, SamplingPolicy, SeededRandomness, TokenId,
    Transformer, TransformerConfig, Vocab,
};

const CONFIG: TransformerConfig = TransformerConfig { layers: 4, heads: 4, dim: 64, max_context: 512, vocab_size: 258 };

fn oracle() -> Arc<Transformer> {
    let init = InitOptions { std: 0.02, embed_std: 0.1, copy_gain: 1.0 };
    Arc::new(Transformer::init_random_with(CONFIG, init, 7).unwrap())
}

fn forward_tree(c: &mut Criterion) {
    let model = oracle();
    let prefix = bundled_prompts()[0].tokens();
    let base = model.prefill(&prefix).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("forward_tree");
    for nodes in [1, 4, 16] {
        let tree = loop {
            let t = random_tree(&mut rng, nodes, 8, 256);
            if t.len() == nodes {
                break t;
            }
        };
        let batch = tree_mask(&tree, prefix.len()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(nodes), &batch, |b, batch| {
            b.iter(|| model.decode_tree(&mut base.clone(), batch).unwrap())
        });
    }
    group.finish();
}

fn engine_step(c: &mut Criterion) {
    let model = oracle();
    let base: Arc<dyn LanguageModel> = model.clone();
    let draft = MixtureModel::new(base, 0.3, ModelCost { param_bytes: model.cost().param_bytes / 20 }).unwrap();
    let contexts: Vec<Vec<TokenId>> = corpus_contexts().iter().map(|p| p.tokens()).collect();
    let corpus = make_corpus(&draft, Vocab::bytes(), 1.5, 20_000, 256, &contexts, 1).unwrap();
    let katz = KatzTrigram::train(&corpus, Vocab::bytes(), 5).unwrap();
    let prompt = bundled_prompts()[0].tokens();
    let mut group = c.benchmark_group("engine_step");
    group.sample_size(20);
    for policy in [SamplingPolicy::Greedy, SamplingPolicy::topk(8, 1.0)] {
        for method in Method::ALL {
            let config = EngineConfig { policy, ..EngineConfig::default() };
            let engine = Engine::new(method, config, model.as_ref(), Some(&draft), Some(&katz)).unwrap();
            let session = engine.start(&prompt).unwrap();
            let id = BenchmarkId::new(method.as_str(), policy.label());
            group.bench_function(id, |b| {
                let mut rng = SeededRandomness::new(0);
                b.iter(|| engine.step(&mut session.clone(), 64, &mut rng).unwrap())
            });
        }
    }
    group.finish();
}

fn katz_dist(c: &mut Criterion) {
    let text: Vec<TokenId> = bundled_prompts().iter().chain(&corpus_contexts()).flat_map(|p| p.tokens()).collect();
    let corpus: Vec<TokenId> = text.iter().cycle().take(200_000).copied().collect();
    let katz = KatzTrigram::train(&corpus, Vocab::bytes(), 5).unwrap();
    let (u, v) = (TokenId(b' ' as u32), TokenId(b' ' as u32));
    c.bench_function("katz_dist/seen_context", |b| b.iter(|| katz.dist(u, v)));
    c.bench_function("katz_dist/unseen_context", |b| b.iter(|| katz.dist(TokenId(1), TokenId(2))));
}

criterion_group!(benches, forward_tree, engine_step, katz_dist);
criterion_main!(benches);
