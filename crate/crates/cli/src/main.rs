//! `specdec`: build models, train the draft² trigram, generate, benchmark and verify.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 failed verification,
//! 3 I/O or corrupt file.

mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use specdec::benchmark::{bundled_prompts, corpus_contexts, parse_prompts, run_benchmark, BenchConfig, BenchModels};
use specdec::harness::MixtureModel;
use specdec::metrics::{account, render_origin, BandwidthReport, OriginFormat, OriginMarkup, StageCosts};
use specdec::ngram::{make_corpus, unigram_perplexity, DEFAULT_K_THRESHOLD};
use specdec::verify::{self, Suite};
use specdec::vocab::{decode, encode_prompt};
use specdec::{
    Engine, KatzTrigram, LanguageModel, Method, ModelCost, SamplingPolicy, StageTag, StepResult, TokenId,
    Transformer, Vocab,
};

use config::{read_toml, ModelFile, PromptSource, Run};

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "specdec", version, about = "Staged speculative decoding at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random transformer weight file.
    MakeModel {
        /// Model shape and init (TOML); defaults to 4 layers, 4 heads, D=64, N=512.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a corpus from the draft and train the draft² trigram on it.
    TrainNgram {
        /// Weight file of the model to sample from.
        #[arg(long)]
        model: PathBuf,
        /// Sample from the aligned mixture with this lambda instead of the model.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 1.5)]
        temperature: f64,
        #[arg(long, default_value_t = 1_000_000)]
        tokens: usize,
        #[arg(long, default_value_t = 256)]
        segment_len: usize,
        /// Conditioning texts: `bundled`, `none`, or a prompt-list file.
        #[arg(long, default_value = "bundled")]
        contexts: String,
        #[arg(long, default_value_t = DEFAULT_K_THRESHOLD)]
        k: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a continuation with the configured method.
    Gen {
        #[arg(long)]
        run_config: PathBuf,
        /// Prompt text; overrides the config's prompt.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, conflicts_with = "prompt")]
        prompt_file: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Origin::None)]
        origin: Origin,
        /// Print the JSON record instead of text.
        #[arg(long)]
        json: bool,
        /// Write output here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every method and sampling mode over a prompt list.
    Bench {
        #[arg(long)]
        run_config: PathBuf,
        /// Prompt list (one JSON object per line); overrides the config.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// `all` or a comma-separated list of methods.
        #[arg(long, default_value = "all")]
        methods: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the built-in verification suites.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Origin {
    Ansi,
    Html,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Exactness,
    Tree,
    Ngram,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Exactness => Suite::Exactness,
            SuiteArg::Tree => Suite::Tree,
            SuiteArg::Ngram => Suite::Ngram,
            SuiteArg::All => Suite::All,
        }
    }
}

/// Verification ran but did not pass.
#[derive(Debug)]
struct VerifyFailed;

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for VerifyFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<VerifyFailed>() {
            return EXIT_VERIFY;
        }
        if cause.is::<io::Error>() {
            return EXIT_IO;
        }
        if let Some(err) = cause.downcast_ref::<specdec::Error>() {
            return match err {
                specdec::Error::Io(_) | specdec::Error::CorruptWeights(_) | specdec::Error::CorruptModel(_) => EXIT_IO,
                _ => EXIT_USAGE,
            };
        }
    }
    EXIT_USAGE
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeModel { config, seed, out } => make_model(config.as_deref(), seed, &out),
        Command::TrainNgram { model, lambda, temperature, tokens, segment_len, contexts, k, seed, out } => {
            train_ngram(&model, lambda, temperature, tokens, segment_len, &contexts, k, seed, &out)
        }
        Command::Gen { run_config, prompt, prompt_file, method, seed, origin, json, out } => {
            gen(&run_config, prompt, prompt_file, method, seed, origin, json, out.as_deref())
        }
        Command::Bench { run_config, prompts, methods, seed, out_dir } => {
            bench(&run_config, prompts.as_deref(), &methods, seed, &out_dir)
        }
        Command::Verify { suite, seed } => verify_cmd(suite.into(), seed),
    }
}

fn make_model(config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let spec: ModelFile = match config {
        Some(p) => read_toml(p)?,
        None => ModelFile::default(),
    };
    let model = Transformer::init_random_with(spec.transformer_config(), spec.init_options(), seed)?;
    model.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("parameters: {}", model.param_count());
    println!("param_bytes: {}", model.cost().param_bytes);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_ngram(
    model_path: &Path,
    lambda: Option<f64>,
    temperature: f64,
    tokens: usize,
    segment_len: usize,
    contexts: &str,
    k: u32,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let base = Arc::new(Transformer::load(model_path)?);
    let model: Box<dyn LanguageModel> = match lambda {
        Some(l) => {
            let b: Arc<dyn LanguageModel> = base.clone();
            Box::new(MixtureModel::new(b, l, ModelCost::FREE)?)
        }
        None => Box::new(base.as_ref().clone()),
    };
    let vocab = Vocab::bytes();
    if model.vocab_size() != vocab.size {
        bail!("train-ngram needs a byte-vocabulary model, got {}", model.vocab_size());
    }
    let contexts: Vec<Vec<TokenId>> = match contexts {
        "none" => Vec::new(),
        "bundled" => corpus_contexts().iter().map(|p| p.tokens()).collect(),
        file => read_prompts(Path::new(file))?.iter().map(|p| p.tokens()).collect(),
    };
    let corpus = make_corpus(model.as_ref(), vocab, temperature, tokens, segment_len, &contexts, seed)?;
    let held_out_len = (tokens / 10).clamp(1000, 100_000);
    let held_out =
        make_corpus(model.as_ref(), vocab, temperature, held_out_len, segment_len, &contexts, seed ^ 0x9e37_79b9)?;
    let katz = KatzTrigram::train(&corpus, vocab, k)?;
    katz.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("corpus tokens: {}", corpus.len());
    println!("held-out tokens: {}", held_out.len());
    println!("held-out perplexity: {:.4}", katz.perplexity(&held_out));
    println!("unigram perplexity: {:.4}", unigram_perplexity(&corpus, &held_out, vocab)?);
    println!("uniform perplexity: {:.4}", (vocab.size - 1) as f64);
    Ok(())
}

fn read_prompts(path: &Path) -> Result<Vec<specdec::benchmark::Prompt>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_prompts(&text)?)
}

/// JSON record of one `gen` run.
#[derive(Serialize)]
struct GenRecord<'a> {
    method: Method,
    sampling: SamplingPolicy,
    seed: u64,
    prompt: String,
    text: String,
    emitted: Vec<TokenId>,
    origins: &'a [StageTag],
    steps: &'a [StepResult],
    bandwidth: BandwidthReport,
}

#[allow(clippy::too_many_arguments)]
fn gen(
    run_config: &Path,
    prompt: Option<String>,
    prompt_file: Option<PathBuf>,
    method: Option<Method>,
    seed: Option<u64>,
    origin: Origin,
    json: bool,
    out: Option<&Path>,
) -> Result<()> {
    let run = Run::load(run_config)?;
    let c = &run.config;
    let text = match (prompt, prompt_file, &c.prompt) {
        (Some(t), _, _) => t,
        (None, Some(f), _) => fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?,
        (None, None, Some(PromptSource::Text(t))) => t.clone(),
        (None, None, Some(PromptSource::File(f))) => {
            let f = run.path(f);
            fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?
        }
        (None, None, None) => bail!("no prompt: pass --prompt or set `prompt` in the run config"),
    };
    let models = run.load_models()?;
    let method = method.unwrap_or(c.method);
    let seed = seed.unwrap_or(c.seed);
    let draft2 = models.draft2.as_ref().map(|m| m as &dyn LanguageModel);
    let engine = Engine::new(method, c.engine_config(), models.oracle.as_ref(), Some(models.draft.as_ref()), draft2)?;
    let generation = engine.generate(&encode_prompt(&text), c.max_tokens, seed)?;
    let costs = StageCosts {
        oracle: models.oracle.cost(),
        draft: models.draft.cost(),
        draft2: draft2.map(|m| m.cost()).unwrap_or(ModelCost::FREE),
    };
    let output = if json {
        let record = GenRecord {
            method,
            sampling: c.sampling,
            seed,
            prompt: text,
            text: decode(&generation.tokens),
            emitted: generation.tokens.clone(),
            origins: &generation.origins,
            steps: &generation.steps,
            bandwidth: account(&generation.steps, &costs)?,
        };
        let mut s = serde_json::to_string_pretty(&record)?;
        s.push('\n');
        s
    } else {
        let markup = OriginMarkup::from_generation(&generation);
        let mut s = match origin {
            Origin::Ansi => render_origin(&markup, OriginFormat::Ansi),
            Origin::Html => render_origin(&markup, OriginFormat::Html),
            Origin::None => decode(&generation.tokens),
        };
        if !s.ends_with('\n') {
            s.push('\n');
        }
        s
    };
    write_output(out, output.as_bytes())
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(bytes)?;
            Ok(stdout.flush()?)
        }
    }
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    if s == "all" {
        return Ok(Method::ALL.to_vec());
    }
    let mut methods: Vec<Method> = s.split(',').map(|m| m.trim().parse()).collect::<Result<_, _>>()?;
    methods.sort();
    methods.dedup();
    Ok(methods)
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("SPECDEC_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => bail!("SPECDEC_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(None),
    }
}

fn bench(run_config: &Path, prompts: Option<&Path>, methods: &str, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let run = Run::load(run_config)?;
    let c = &run.config;
    let prompts = match (prompts, &c.bench.prompts) {
        (Some(p), _) => read_prompts(p)?,
        (None, Some(p)) => read_prompts(&run.path(p))?,
        (None, None) => bundled_prompts(),
    };
    let models = run.load_models()?;
    let config = BenchConfig {
        methods: parse_methods(methods)?,
        policies: c.bench.modes.clone(),
        engine: c.engine_config(),
        max_tokens: c.max_tokens,
        seed: seed.unwrap_or(c.seed),
        threads: threads_from_env()?,
    };
    let bench_models = BenchModels {
        oracle: models.oracle.as_ref(),
        draft: models.draft.as_ref(),
        draft2: models.draft2.as_ref().map(|m| m as &dyn LanguageModel),
    };
    let result = run_benchmark(bench_models, &prompts, &config)?;
    let summary = result.summary()?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    };
    write("results.csv", result.to_csv()?.as_bytes())?;
    write("summary.json", (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    write("timing.json", (serde_json::to_string_pretty(&result.timing()?)? + "\n").as_bytes())?;

    println!("{:<16} {:<12} {:>10} {:>10} {:>9} {:>9}", "mode", "method", "rel_bw", "ref_bw", "tok/call", "draft2%");
    for mode in &summary.modes {
        let reference = if mode.policy.is_greedy() {
            &summary.reference.relative_bandwidth_greedy
        } else {
            &summary.reference.relative_bandwidth_topk
        };
        for m in &mode.methods {
            let frac = m.origins.draft2 as f64 / m.bandwidth.emitted as f64;
            println!(
                "{:<16} {:<12} {:>10.4} {:>10.2} {:>9.3} {:>9.2}",
                mode.mode.to_string(),
                m.method.to_string(),
                m.relative_bandwidth,
                reference.get(&m.method).copied().unwrap_or(f64::NAN),
                m.tokens_per_call_mean,
                100.0 * frac
            );
        }
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn verify_cmd(suite: Suite, seed: u64) -> Result<()> {
    let reports = verify::run(suite, seed)?;
    for r in &reports {
        println!("{r}");
    }
    if reports.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(VerifyFailed.into())
    }
}
