//! Runs every decoding method over a prompt list and reports per-prompt rows and
//! aggregate summaries.
//!
//! Each prompt gets its own seed derived from the run seed, shared by all methods,
//! so results do not depend on scheduling. Wall-clock time is kept apart from the
//! deterministic outputs.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineConfig, Method, StageCounts};
use crate::error::{Error, Result};
use crate::metrics::{summarize, BandwidthReport, RunStats, StageCosts, ThroughputReport};
use crate::model::LanguageModel;
use crate::rng::derive_seed;
use crate::sampling::SamplingPolicy;
use crate::tree::StageTag;
use crate::vocab::{encode_prompt, TokenId};

const BUNDLED_PROMPTS: &str = include_str!("../data/prompts.jsonl");
const CORPUS_CONTEXTS: &str = include_str!("../data/corpus_contexts.jsonl");

/// Rough entropy class of a prompt's natural continuation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptClass {
    /// Indented, repetitive or whitespace-heavy text.
    Low,
    /// Prose, identifiers, numbers and other varied text.
    High,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub name: String,
    pub class: PromptClass,
    pub text: String,
}

impl Prompt {
    pub fn tokens(&self) -> Vec<TokenId> {
        encode_prompt(&self.text)
    }
}

/// Parse one JSON prompt object per line. Blank lines are skipped.
pub fn parse_prompts(jsonl: &str) -> Result<Vec<Prompt>> {
    let prompts: Vec<Prompt> = jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::InvalidArgument(format!("prompt line {}: {e}", i + 1)))
        })
        .collect::<Result<_>>()?;
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("prompt list is empty".into()));
    }
    Ok(prompts)
}

/// The 64 prompts shipped with the crate, half of each class.
pub fn bundled_prompts() -> Vec<Prompt> {
    parse_prompts(BUNDLED_PROMPTS).expect("bundled prompts parse")
}

/// In-domain texts, disjoint from [`bundled_prompts`], that condition the draft
/// while sampling the draft² training corpus.
pub fn corpus_contexts() -> Vec<Prompt> {
    parse_prompts(CORPUS_CONTEXTS).expect("bundled corpus contexts parse")
}

/// Models of a benchmark run and their costs.
#[derive(Clone, Copy)]
pub struct BenchModels<'m> {
    pub oracle: &'m dyn LanguageModel,
    pub draft: &'m dyn LanguageModel,
    pub draft2: Option<&'m dyn LanguageModel>,
}

impl BenchModels<'_> {
    pub fn costs(&self) -> StageCosts {
        StageCosts {
            oracle: self.oracle.cost(),
            draft: self.draft.cost(),
            draft2: self.draft2.map(|m| m.cost()).unwrap_or(crate::model::ModelCost::FREE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    /// Sampling modes; every method runs under each.
    pub policies: Vec<SamplingPolicy>,
    /// Tree shape. Its policy is replaced by each entry of `policies`.
    pub engine: EngineConfig,
    pub max_tokens: usize,
    pub seed: u64,
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            methods: Method::ALL.to_vec(),
            policies: vec![SamplingPolicy::Greedy, SamplingPolicy::topk(8, 1.0)],
            engine: EngineConfig::default(),
            max_tokens: 128,
            seed: 0,
            threads: None,
        }
    }
}

/// One method on one prompt under one sampling mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRun {
    pub mode: String,
    pub method: Method,
    pub prompt: usize,
    pub class: PromptClass,
    pub stats: RunStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub costs: StageCosts,
    pub runs: Vec<PromptRun>,
}

/// Run every (mode, method, prompt) combination.
pub fn run_benchmark(models: BenchModels<'_>, prompts: &[Prompt], config: &BenchConfig) -> Result<BenchResult> {
    if prompts.is_empty() || config.methods.is_empty() || config.policies.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs prompts, methods and sampling modes".into()));
    }
    let mut jobs = Vec::new();
    for policy in &config.policies {
        for &method in &config.methods {
            let engine_config = EngineConfig { policy: *policy, ..config.engine };
            let engine = Engine::new(method, engine_config, models.oracle, Some(models.draft), models.draft2)?;
            for (i, p) in prompts.iter().enumerate() {
                jobs.push((policy.label(), engine, i, p));
            }
        }
    }
    let costs = models.costs();
    let run = |(mode, engine, i, p): &(String, Engine<'_>, usize, &Prompt)| -> Result<PromptRun> {
        let seed = derive_seed(config.seed, &format!("prompt-{i}"));
        let start = Instant::now();
        let generation = engine.generate(&p.tokens(), config.max_tokens, seed)?;
        let seconds = start.elapsed().as_secs_f64();
        Ok(PromptRun {
            mode: mode.clone(),
            method: engine.method(),
            prompt: *i,
            class: p.class,
            stats: RunStats::from_generation(&generation, &costs, Some(seconds))?,
        })
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    let runs = pool.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?;
    Ok(BenchResult { config: config.clone(), costs, runs })
}

/// One CSV row per (mode, method, prompt).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub mode: String,
    pub method: Method,
    pub prompt: usize,
    pub class: PromptClass,
    /// Rank of the prompt within its mode when sorted by staged tokens per call.
    pub sorted_index: usize,
    pub emitted: usize,
    pub oracle_calls: usize,
    pub tokens_per_call: f64,
    /// Tokens per call relative to the baseline on the same prompt.
    pub relative_performance: Option<f64>,
    pub relative_bandwidth: f64,
    pub origin_oracle: usize,
    pub origin_draft: usize,
    pub origin_draft2: usize,
}

/// Emitted tokens and origins of one prompt class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassOrigins {
    pub emitted: usize,
    pub origins: StageCounts,
    pub draft2_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub relative_bandwidth: f64,
    pub bandwidth: BandwidthReport,
    pub tokens_per_call_mean: f64,
    pub tokens_per_call_median: f64,
    pub speedup_tokens_per_call: Option<f64>,
    pub acceptance_rate: BTreeMap<StageTag, Option<f64>>,
    pub origins: StageCounts,
    pub by_class: BTreeMap<PromptClass, ClassOrigins>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub policy: SamplingPolicy,
    pub methods: Vec<MethodSummary>,
}

/// Published large-model figures, reported next to the measured ones. They come
/// from different models and hardware and are never asserted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub relative_bandwidth_greedy: BTreeMap<Method, f64>,
    pub relative_bandwidth_topk: BTreeMap<Method, f64>,
    pub tokens_per_second_greedy: BTreeMap<Method, f64>,
    pub tokens_per_second_topk: BTreeMap<Method, f64>,
}

impl ReferenceValues {
    pub fn published() -> Self {
        let m = |b: f64, s: f64, t: f64| BTreeMap::from([(Method::Baseline, b), (Method::Speculative, s), (Method::Staged, t)]);
        ReferenceValues {
            relative_bandwidth_greedy: m(1.00, 0.31, 0.23),
            relative_bandwidth_topk: m(1.00, 0.48, 0.35),
            tokens_per_second_greedy: m(150.0, 350.0, 475.0),
            tokens_per_second_topk: m(150.0, 219.0, 298.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub seed: u64,
    pub max_tokens: usize,
    pub prompts: usize,
    pub engine: EngineConfig,
    pub costs: StageCosts,
    pub modes: Vec<ModeSummary>,
    pub reference: ReferenceValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: Method,
    pub seconds: f64,
    pub tokens_per_second: Option<f64>,
    pub speedup_wall_clock: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTiming {
    pub mode: String,
    pub methods: Vec<MethodTiming>,
}

impl BenchResult {
    fn modes(&self) -> Vec<String> {
        self.config.policies.iter().map(|p| p.label()).collect()
    }

    fn select(&self, mode: &str, method: Method) -> Vec<&PromptRun> {
        self.runs.iter().filter(|r| r.mode == mode && r.method == method).collect()
    }

    fn report(&self, mode: &str, method: Method) -> Result<ThroughputReport> {
        let stats: Vec<RunStats> = self.select(mode, method).iter().map(|r| r.stats.clone()).collect();
        summarize(&stats)
    }

    /// Rows in (mode, method, prompt) order.
    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let mut rows = Vec::with_capacity(self.runs.len());
        for mode in self.modes() {
            let tpc = |method: Method| -> BTreeMap<usize, f64> {
                self.select(&mode, method).iter().map(|r| (r.prompt, r.stats.tokens_per_call)).collect()
            };
            let baseline = tpc(Method::Baseline);
            let order_key = {
                let staged = tpc(Method::Staged);
                if staged.is_empty() { tpc(self.config.methods[self.config.methods.len() - 1]) } else { staged }
            };
            let mut ranked: Vec<(usize, f64)> = order_key.into_iter().collect();
            ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let rank: BTreeMap<usize, usize> = ranked.iter().enumerate().map(|(k, &(p, _))| (p, k)).collect();
            for &method in &self.config.methods {
                let mut runs = self.select(&mode, method);
                runs.sort_by_key(|r| r.prompt);
                for r in runs {
                    let s = &r.stats;
                    rows.push(CsvRow {
                        mode: mode.clone(),
                        method,
                        prompt: r.prompt,
                        class: r.class,
                        sorted_index: rank.get(&r.prompt).copied().unwrap_or(r.prompt),
                        emitted: s.emitted,
                        oracle_calls: s.oracle_calls,
                        tokens_per_call: s.tokens_per_call,
                        relative_performance: baseline.get(&r.prompt).map(|b| s.tokens_per_call / b),
                        relative_bandwidth: s.bandwidth.relative_bandwidth,
                        origin_oracle: s.origins.oracle,
                        origin_draft: s.origins.draft,
                        origin_draft2: s.origins.draft2,
                    });
                }
            }
        }
        rows
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.csv_rows() {
            w.serialize(row).map_err(|e| Error::Internal(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(format!("csv: {e}")))
    }

    pub fn summary(&self) -> Result<BenchSummary> {
        let mut modes = Vec::new();
        for (mode, policy) in self.modes().into_iter().zip(&self.config.policies) {
            let baseline = self.report(&mode, Method::Baseline).ok();
            let mut methods = Vec::new();
            for &method in &self.config.methods {
                let runs = self.select(&mode, method);
                let report = self.report(&mode, method)?;
                let bw: Vec<BandwidthReport> = runs.iter().map(|r| r.stats.bandwidth).collect();
                let bandwidth = BandwidthReport::combine(&bw, &self.costs)?;
                let mut by_class: BTreeMap<PromptClass, ClassOrigins> = BTreeMap::new();
                for r in &runs {
                    let c = by_class.entry(r.class).or_default();
                    c.emitted += r.stats.emitted;
                    c.origins.add(&r.stats.origins);
                }
                for c in by_class.values_mut() {
                    c.draft2_fraction = c.origins.draft2 as f64 / c.emitted as f64;
                }
                methods.push(MethodSummary {
                    method,
                    relative_bandwidth: bandwidth.relative_bandwidth,
                    bandwidth,
                    tokens_per_call_mean: report.tokens_per_call_mean,
                    tokens_per_call_median: report.tokens_per_call_median,
                    speedup_tokens_per_call: baseline
                        .as_ref()
                        .map(|b| report.tokens_per_call_mean / b.tokens_per_call_mean),
                    acceptance_rate: StageTag::ALL.iter().map(|&s| (s, report.acceptance.rate(s))).collect(),
                    origins: report.origins,
                    by_class,
                });
            }
            modes.push(ModeSummary { mode, policy: *policy, methods });
        }
        Ok(BenchSummary {
            seed: self.config.seed,
            max_tokens: self.config.max_tokens,
            prompts: self.runs.iter().map(|r| r.prompt + 1).max().unwrap_or(0),
            engine: self.config.engine,
            costs: self.costs,
            modes,
            reference: ReferenceValues::published(),
        })
    }

    /// Wall-clock figures. These vary between runs and machines.
    pub fn timing(&self) -> Result<Vec<ModeTiming>> {
        let mut out = Vec::new();
        for mode in self.modes() {
            let baseline = self.report(&mode, Method::Baseline).ok();
            let mut methods = Vec::new();
            for &method in &self.config.methods {
                let report = self.report(&mode, method)?;
                let seconds = self.select(&mode, method).iter().filter_map(|r| r.stats.wall_seconds).sum();
                methods.push(MethodTiming {
                    method,
                    seconds,
                    tokens_per_second: report.tokens_per_second,
                    speedup_wall_clock: baseline
                        .as_ref()
                        .and_then(|b| report.tokens_per_second.zip(b.tokens_per_second))
                        .map(|(a, b)| a / b),
                });
            }
            out.push(ModeTiming { mode, methods });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::TableModel;
    use crate::model::ModelCost;

    #[test]
    fn bundled_prompts_balanced() {
        let p = bundled_prompts();
        assert_eq!(p.len(), 64);
        assert_eq!(p.iter().filter(|p| p.class == PromptClass::Low).count(), 32);
        assert!(p.iter().all(|p| !p.text.is_empty()));
    }

    #[test]
    fn corpus_contexts_disjoint_from_prompts() {
        let prompts: Vec<String> = bundled_prompts().into_iter().map(|p| p.text).collect();
        let contexts = corpus_contexts();
        assert_eq!(contexts.len(), 64);
        assert!(contexts.iter().all(|c| !prompts.contains(&c.text)));
    }

    #[test]
    fn bad_prompt_line_rejected() {
        assert!(parse_prompts("{\"name\":\"a\"}").is_err());
        assert!(parse_prompts("\n\n").is_err());
    }

    fn tiny_run(threads: usize) -> BenchResult {
        let oracle = TableModel::random(258, 1, 0.0, 1, ModelCost { param_bytes: 100 }).unwrap();
        let draft = TableModel::random(258, 1, 0.0, 2, ModelCost { param_bytes: 10 }).unwrap();
        let prompts = &bundled_prompts()[..4];
        let config = BenchConfig { max_tokens: 12, threads: Some(threads), ..BenchConfig::default() };
        run_benchmark(BenchModels { oracle: &oracle, draft: &draft, draft2: None }, prompts, &config).unwrap()
    }

    #[test]
    fn outputs_independent_of_thread_count() {
        let a = tiny_run(1);
        let b = tiny_run(3);
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(a.summary().unwrap(), b.summary().unwrap());
    }

    #[test]
    fn baseline_rows_are_unit() {
        let r = tiny_run(1);
        for row in r.csv_rows().iter().filter(|r| r.method == Method::Baseline) {
            assert_eq!(row.relative_bandwidth, 1.0);
            assert_eq!(row.tokens_per_call, 1.0);
            assert_eq!(row.relative_performance, Some(1.0));
        }
        let s = r.summary().unwrap();
        for m in s.modes.iter().flat_map(|m| &m.methods) {
            let total: usize = m.by_class.values().map(|c| c.emitted).sum();
            assert_eq!(m.origins.oracle + m.origins.draft + m.origins.draft2, total);
        }
    }
}
