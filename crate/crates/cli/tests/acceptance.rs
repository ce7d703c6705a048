//! End-to-end acceptance suite. Builds a seeded oracle, trains the draft² trigram
//! and runs the benchmark through the `specdec` binary, then checks each criterion
//! and prints one PASS/FAIL line per criterion.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use specdec::benchmark::{bundled_prompts, corpus_contexts, BenchSummary, CsvRow, PromptClass};
use specdec::harness::{token_agreement, ExactnessInstance, MixtureModel, TableModel};
use specdec::ngram::{make_corpus, unigram_perplexity};
use specdec::sampling::warp_logits;
use specdec::{
    Engine, EngineConfig, KatzTrigram, LanguageModel, Method, ModelCost, ProbVector, SamplingPolicy,
    SeededRandomness, StepResult, TokenId, Transformer, Vocab,
};

const MODEL_SEED: u64 = 7;
const CORPUS_TOKENS: usize = 100_000;
const LAMBDA: f64 = 0.3;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome { passed, detail: detail.into() }
    }
}

/// Paths produced by the CLI pipeline.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    train_log: String,
}

impl Workspace {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn specdec(args: &[&str], envs: &[(&str, &str)]) -> Result<Output> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_specdec"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().context("spawning specdec")?;
    Ok(out)
}

fn specdec_ok(args: &[&str], envs: &[(&str, &str)]) -> Result<String> {
    let out = specdec(args, envs)?;
    ensure!(
        out.status.success(),
        "specdec {} failed ({}): {}",
        args.join(" "),
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8(out.stdout)?)
}

fn setup() -> Result<Workspace> {
    let dir = tempfile::tempdir()?;
    let root = dir.path().to_path_buf();
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    specdec_ok(
        &[
            "make-model",
            "--config",
            &s(repo_file("configs/model.toml")),
            "--seed",
            &MODEL_SEED.to_string(),
            "--out",
            &s(root.join("oracle.sttf")),
        ],
        &[],
    )?;
    let train_log = specdec_ok(
        &[
            "train-ngram",
            "--model",
            &s(root.join("oracle.sttf")),
            "--lambda",
            &LAMBDA.to_string(),
            "--tokens",
            &CORPUS_TOKENS.to_string(),
            "--seed",
            "1",
            "--out",
            &s(root.join("draft2.katz")),
        ],
        &[],
    )?;
    fs::copy(repo_file("configs/bench.toml"), root.join("bench.toml"))?;
    Ok(Workspace { _dir: dir, root, train_log })
}

struct Models {
    oracle: Arc<Transformer>,
    draft: MixtureModel,
    draft2: KatzTrigram,
}

fn load_models(ws: &Workspace) -> Result<Models> {
    let oracle = Arc::new(Transformer::load(ws.path("oracle.sttf"))?);
    let cost = ModelCost { param_bytes: oracle.cost().param_bytes / 20 };
    let base: Arc<dyn LanguageModel> = oracle.clone();
    let draft = MixtureModel::new(base, LAMBDA, cost)?;
    let draft2 = KatzTrigram::load(ws.path("draft2.katz"))?;
    Ok(Models { oracle, draft, draft2 })
}

/// Greedy continuation with the smallest top-2 logit gap seen along the way.
fn greedy_reference(model: &Transformer, prompt: &[TokenId], max_tokens: usize) -> Result<(Vec<TokenId>, f64)> {
    let mut state = model.prefill(prompt)?;
    let mut logits = state.last_logits().expect("prefilled").clone();
    let mut out = Vec::new();
    let mut min_gap = f64::INFINITY;
    while out.len() < max_tokens {
        min_gap = min_gap.min(logits.top2_gap());
        let t = logits.argmax();
        out.push(t);
        if t == TokenId::EOS || out.len() == max_tokens {
            break;
        }
        logits = model.forward_sequential(&mut state, t)?;
    }
    Ok((out, min_gap))
}

fn criterion_1(models: &Models) -> Result<Outcome> {
    const WANTED: usize = 50;
    const TOKENS: usize = 256;
    let config = EngineConfig::default();
    let draft2: &dyn LanguageModel = &models.draft2;
    let engines = Method::ALL
        .iter()
        .map(|&m| Engine::new(m, config, models.oracle.as_ref(), Some(&models.draft), Some(draft2)))
        .collect::<specdec::Result<Vec<_>>>()?;
    let candidates = bundled_prompts().into_iter().chain(corpus_contexts());
    let (mut used, mut excluded, mut mismatches) = (0, 0, Vec::new());
    for prompt in candidates {
        if used == WANTED {
            break;
        }
        let tokens = prompt.tokens();
        let (reference, gap) = greedy_reference(&models.oracle, &tokens, TOKENS)?;
        if gap < 1e-3 {
            excluded += 1;
            continue;
        }
        used += 1;
        for engine in &engines {
            let g = engine.generate(&tokens, TOKENS, 0)?;
            if g.tokens != reference {
                mismatches.push(format!("{} on {}", engine.method(), prompt.name));
            }
        }
    }
    ensure!(used == WANTED, "only {used} prompts without near ties");
    Ok(Outcome::new(
        mismatches.is_empty(),
        format!(
            "{used} prompts x {TOKENS} tokens, {excluded} near-tie prompts excluded, {} mismatches {:?}",
            mismatches.len(),
            mismatches
        ),
    ))
}

fn verify_suite(suite: &str) -> Result<Outcome> {
    let out = specdec(&["verify", "--suite", suite, "--seed", "0"], &[])?;
    let text = String::from_utf8_lossy(&out.stdout).trim().replace('\n', "; ");
    Ok(Outcome::new(out.status.success(), text))
}

fn criterion_2() -> Result<Outcome> {
    verify_suite("tree")
}

/// Draw first tokens of one staged step and compare with the warped oracle.
fn chi_square(samples: usize) -> Result<(f64, String)> {
    // first instance with a branching tree, draft² chains and at least three candidates
    let inst = (0..)
        .map(ExactnessInstance::random)
        .find(|i| {
            i.as_ref().map_or(true, |i| {
                let c = &i.config;
                c.oracle_budget >= 3
                    && c.max_children >= 2
                    && c.max_depth >= 2
                    && c.draft2_chain_len >= 1
                    && matches!(c.policy, SamplingPolicy::Topk { k, .. } if k >= 3)
            })
        })
        .expect("unbounded search")?;
    let engine = inst.engine(Method::Staged)?;
    let target = inst.target()?;
    let session = engine.start(&inst.prompt)?;
    let mut rng = SeededRandomness::new(2024);
    let mut counts = vec![0u64; target.len()];
    for _ in 0..samples {
        let mut s = session.clone();
        let step = engine.step(&mut s, usize::MAX / 2, &mut rng)?;
        counts[step.emitted[0].token.index()] += 1;
    }
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (c, &p) in counts.iter().zip(target.values()) {
        if p == 0.0 {
            if *c > 0 {
                return Ok((0.0, format!("token with zero target probability drawn {c} times")));
            }
            continue;
        }
        let e = p * samples as f64;
        stat += (*c as f64 - e).powi(2) / e;
        cells += 1;
    }
    if cells < 2 {
        return Ok((1.0, "target is a point mass".into()));
    }
    let dof = (cells - 1) as f64;
    let p_value = 1.0 - ChiSquared::new(dof)?.cdf(stat);
    Ok((p_value, format!("chi2 {stat:.3} on {dof} dof, config {:?}", inst.config)))
}

fn criterion_3() -> Result<Outcome> {
    let enumeration = verify_suite("exactness")?;
    let (p, detail) = chi_square(1_000_000)?;
    Ok(Outcome::new(
        enumeration.passed && p >= 0.01,
        format!("{}; 10^6 samples: p = {p:.4} ({detail})", enumeration.detail),
    ))
}

fn run_bench(ws: &Workspace, out: &str, threads: &str) -> Result<PathBuf> {
    let dir = ws.path(out);
    let cfg = ws.path("bench.toml");
    specdec_ok(
        &["bench", "--run-config", &cfg.to_string_lossy(), "--out-dir", &dir.to_string_lossy()],
        &[("SPECDEC_THREADS", threads)],
    )?;
    Ok(dir)
}

fn read_summary(dir: &Path) -> Result<BenchSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?)
}

fn criterion_4(summary: &BenchSummary) -> Result<Outcome> {
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in &summary.modes {
        let rb = |m: Method| {
            mode.methods.iter().find(|s| s.method == m).map(|s| s.relative_bandwidth).context("method missing")
        };
        let (spec, staged) = (rb(Method::Speculative)?, rb(Method::Staged)?);
        let reference = if mode.policy.is_greedy() {
            &summary.reference.relative_bandwidth_greedy
        } else {
            &summary.reference.relative_bandwidth_topk
        };
        ok &= staged < spec && spec < 1.0;
        parts.push(format!(
            "{}: staged {staged:.4} < speculative {spec:.4} < 1 (published {:.2}/{:.2})",
            mode.mode, reference[&Method::Staged], reference[&Method::Speculative]
        ));
    }
    Ok(Outcome::new(ok, parts.join("; ")))
}

/// Order-0 oracle over 16 tokens (about half of them impossible) with a
/// uniform-mixture draft of the given lambda.
fn order0_pair(lambda: f64, seed: u64) -> Result<(Arc<dyn LanguageModel>, MixtureModel)> {
    let table = TableModel::random(16, 0, 0.5, seed, ModelCost { param_bytes: 100 })?;
    let oracle: Arc<dyn LanguageModel> = Arc::new(table);
    let draft = MixtureModel::new(oracle.clone(), lambda, ModelCost { param_bytes: 10 })?;
    Ok((oracle, draft))
}

fn warped_first(model: &dyn LanguageModel, policy: &SamplingPolicy) -> Result<ProbVector> {
    let state = model.prefill(&[TokenId(0)])?;
    Ok(warp_logits(state.last_logits().expect("prefilled"), policy))
}

fn prompt_for(i: u64) -> Vec<TokenId> {
    (0..1 + i % 3).map(|j| TokenId(((i * 7 + j * 3) % 16) as u32)).collect()
}

fn collect_steps(engine: &Engine<'_>, prompts: u64, tokens: usize) -> Result<Vec<Vec<StepResult>>> {
    (0..prompts).map(|i| Ok(engine.generate(&prompt_for(i), tokens, 1000 + i)?.steps)).collect()
}

fn tokens_per_call(runs: &[Vec<StepResult>]) -> f64 {
    let emitted: usize = runs.iter().flatten().map(|s| s.emitted.len()).sum();
    let calls: usize = runs.iter().map(Vec::len).sum();
    emitted as f64 / calls as f64
}

fn criterion_5() -> Result<Outcome> {
    let policy = SamplingPolicy::topk(16, 1.0);
    let config = EngineConfig { policy, ..EngineConfig::default() };
    let (oracle, draft) = order0_pair(0.3, 51)?;
    let (_, draft2) = order0_pair(0.6, 51)?;
    let alpha = token_agreement(&warped_first(oracle.as_ref(), &policy)?, &warped_first(&draft, &policy)?, &policy);

    let engine = |m| Engine::new(m, config, oracle.as_ref(), Some(&draft), Some(&draft2));
    let baseline = collect_steps(&engine(Method::Baseline)?, 100, 64)?;
    let baseline_exact = baseline.iter().flatten().all(|s| s.emitted.len() == 1);

    let spec = collect_steps(&engine(Method::Speculative)?, 100, 200)?;
    let depth = config.max_depth.min(config.oracle_budget - 1);
    let full: Vec<f64> =
        spec.iter().flatten().filter(|s| s.tree_depth == depth).map(|s| s.emitted.len() as f64).collect();
    let n = full.len() as f64;
    let mean = full.iter().sum::<f64>() / n;
    // Tokens per call is 1 + accepted, with P(accepted >= i) = alpha^i up to the chain depth.
    let predicted: f64 = (0..=depth).map(|i| alpha.powi(i as i32)).sum();
    let second: f64 = (1..=depth + 1)
        .map(|k| {
            let pk = if k <= depth { alpha.powi(k as i32 - 1) * (1.0 - alpha) } else { alpha.powi(depth as i32) };
            pk * (k * k) as f64
        })
        .sum();
    let sigma = ((second - predicted * predicted) / n).sqrt();
    let within = (mean - predicted).abs() <= 3.0 * sigma;

    let staged = collect_steps(&engine(Method::Staged)?, 100, 200)?;
    let (tpc_spec, tpc_staged) = (tokens_per_call(&spec), tokens_per_call(&staged));
    Ok(Outcome::new(
        baseline_exact && within && tpc_staged >= tpc_spec,
        format!(
            "baseline 1 token/call: {baseline_exact}; alpha {alpha:.4}, speculative chain mean {mean:.4} vs \
             predicted {predicted:.4} (3 sigma = {:.4}, {} full-depth steps); staged {tpc_staged:.4} >= \
             speculative {tpc_spec:.4}",
            3.0 * sigma,
            full.len()
        ),
    ))
}

fn criterion_6() -> Result<Outcome> {
    let policy = SamplingPolicy::topk(16, 1.0);
    let config = EngineConfig { policy, ..EngineConfig::default() };
    let depth = config.max_depth.min(config.oracle_budget - 1);
    let mut ok = true;
    let mut parts = Vec::new();
    for lambda in [0.1, 0.5] {
        let (oracle, draft) = order0_pair(lambda, 61)?;
        let alpha =
            token_agreement(&warped_first(oracle.as_ref(), &policy)?, &warped_first(&draft, &policy)?, &policy);
        let engine = Engine::new(Method::Speculative, config, oracle.as_ref(), Some(&draft), None)?;
        let runs = collect_steps(&engine, 100, 200)?;
        let mut worst = 0.0f64;
        for i in 1..=depth {
            let eligible: Vec<&StepResult> = runs.iter().flatten().filter(|s| s.tree_depth >= i).collect();
            let n = eligible.len() as f64;
            let hits = eligible.iter().filter(|s| s.accepted_len >= i).count() as f64;
            let expected = alpha.powi(i as i32);
            let bound = 3.0 * (expected * (1.0 - expected) / n).sqrt();
            let dev = (hits / n - expected).abs();
            ok &= dev <= bound;
            worst = worst.max(dev / bound);
        }
        parts.push(format!("lambda {lambda}: alpha {alpha:.4}, worst deviation {worst:.2} of the 3 sigma bound"));
    }
    Ok(Outcome::new(ok, parts.join("; ")))
}

fn normalization_failures(model: &KatzTrigram, seed: u64) -> usize {
    let v = model.vocab().size as u64;
    (0..1000u64)
        .filter(|i| {
            let h = (seed ^ i).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let u = TokenId((h % v) as u32);
            let w = TokenId(((h >> 32) % v) as u32);
            let mass: f64 = model.dist(u, w).values().iter().sum();
            (mass - 1.0).abs() > 1e-6
        })
        .count()
}

fn criterion_7(ws: &Workspace, models: &Models) -> Result<Outcome> {
    // Structured generator: an order-2 table over 16 symbols plus BOS.
    let vocab = Vocab { size: 17, bos: Some(TokenId(16)), eos: None };
    let source = TableModel::random(vocab.size, 2, 0.3, 71, ModelCost::FREE)?;
    let train = make_corpus(&source, vocab, 1.0, 100_000, 64, &[], 72)?;
    let held_out = make_corpus(&source, vocab, 1.0, 100_000, 64, &[], 73)?;
    let katz = KatzTrigram::train(&train, vocab, 5)?;
    let norm = normalization_failures(&katz, 7) + normalization_failures(&models.draft2, 8);
    let (ppl, uni, uniform) =
        (katz.perplexity(&held_out), unigram_perplexity(&train, &held_out, vocab)?, (vocab.size - 1) as f64);
    let ordered = ppl < uni && uni < uniform;

    let file = fs::read(ws.path("draft2.katz"))?;
    let resaved = ws.path("draft2-resaved.katz");
    models.draft2.save(&resaved)?;
    let round_trip = models.draft2.to_bytes() == file && fs::read(&resaved)? == file;

    let bench_line = ws.train_log.lines().filter(|l| l.contains("perplexity")).collect::<Vec<_>>().join(", ");
    Ok(Outcome::new(
        norm == 0 && ordered && round_trip,
        format!(
            "{norm} of 2000 contexts off 1 by more than 1e-6; held-out perplexity katz {ppl:.3} < unigram {uni:.3} \
             < uniform {uniform:.0}: {ordered}; bitwise round trip: {round_trip}; benchmark draft² ({bench_line})"
        ),
    ))
}

fn criterion_8(summary: &BenchSummary, dir: &Path) -> Result<Outcome> {
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in &summary.modes {
        let staged = mode.methods.iter().find(|m| m.method == Method::Staged).context("staged missing")?;
        let (low, high) = (&staged.by_class[&PromptClass::Low], &staged.by_class[&PromptClass::High]);
        ok &= low.draft2_fraction > high.draft2_fraction;
        parts.push(format!(
            "{}: low {:.4} > high {:.4}",
            mode.mode, low.draft2_fraction, high.draft2_fraction
        ));
        for m in &mode.methods {
            let o = m.origins;
            ok &= o.oracle + o.draft + o.draft2 == m.bandwidth.emitted;
            ok &= m.by_class.values().map(|c| c.emitted).sum::<usize>() == m.bandwidth.emitted;
        }
    }
    let mut reader = csv::Reader::from_path(dir.join("results.csv"))?;
    let mut rows = 0;
    for row in reader.deserialize::<CsvRow>() {
        let r = row?;
        rows += 1;
        ok &= r.origin_oracle + r.origin_draft + r.origin_draft2 == r.emitted;
    }
    parts.push(format!("origin counts conserved over {rows} rows and all summaries"));
    Ok(Outcome::new(ok, parts.join("; ")))
}

fn criterion_9(first: &Path, second: &Path) -> Result<Outcome> {
    let mut same = Vec::new();
    for name in ["results.csv", "summary.json"] {
        let a = fs::read(first.join(name))?;
        let b = fs::read(second.join(name))?;
        same.push(format!("{name} identical: {}", a == b));
        if a != b {
            return Ok(Outcome::new(false, same.join("; ")));
        }
    }
    Ok(Outcome::new(true, format!("{} (1 thread vs 2 threads)", same.join("; "))))
}

fn report(n: u32, name: &str, result: Result<Outcome>, started: Instant) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match result {
        Ok(o) => {
            println!("{} criterion {n} {name} [{secs:.1}s]: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
            o.passed
        }
        Err(e) => {
            println!("FAIL criterion {n} {name} [{secs:.1}s]: error: {e:#}");
            false
        }
    }
}

fn main() -> Result<()> {
    let started = Instant::now();
    let ws = setup()?;
    let models = load_models(&ws)?;
    println!("pipeline ready in {:.1}s ({})", started.elapsed().as_secs_f64(), ws.root.display());

    let mut results = Vec::new();
    let t = Instant::now();
    results.push(report(1, "greedy exactness", criterion_1(&models), t));
    let t = Instant::now();
    results.push(report(2, "tree attention equivalence", criterion_2(), t));
    let t = Instant::now();
    results.push(report(3, "distribution preservation", criterion_3(), t));

    let t = Instant::now();
    let first = run_bench(&ws, "bench-1", "1")?;
    let second = run_bench(&ws, "bench-2", "2")?;
    let summary = read_summary(&first)?;
    println!("benchmark ran twice in {:.1}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    results.push(report(4, "relative bandwidth ordering", criterion_4(&summary), t));
    let t = Instant::now();
    results.push(report(5, "tokens per oracle call", criterion_5(), t));
    let t = Instant::now();
    results.push(report(6, "chain acceptance decay", criterion_6(), t));
    let t = Instant::now();
    results.push(report(7, "trigram sanity", criterion_7(&ws, &models), t));
    let t = Instant::now();
    results.push(report(8, "draft² origin trend", criterion_8(&summary, &first), t));
    let t = Instant::now();
    results.push(report(9, "determinism", criterion_9(&first, &second), t));

    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed in {:.1}s", results.len(), started.elapsed().as_secs_f64());
    if passed != results.len() {
        bail!("acceptance criteria failed");
    }
    Ok(())
}
