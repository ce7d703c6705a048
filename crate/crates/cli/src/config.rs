//! TOML configuration files: model shapes for `make-model` and run settings for
//! `gen` and `bench`. Relative paths resolve against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use specdec::harness::MixtureModel;
use specdec::transformer::InitOptions;
use specdec::{EngineConfig, KatzTrigram, LanguageModel, Method, ModelCost, SamplingPolicy, Transformer, TransformerConfig};

/// Shape and initialization of a model written by `make-model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_context")]
    pub max_context: usize,
    #[serde(default = "d_vocab")]
    pub vocab_size: usize,
    #[serde(default)]
    pub init: InitSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default = "d_std")]
    pub std: f32,
    #[serde(default = "d_std")]
    pub embed_std: f32,
    #[serde(default)]
    pub copy_gain: f32,
}

fn d_layers() -> usize {
    4
}
fn d_heads() -> usize {
    4
}
fn d_dim() -> usize {
    64
}
fn d_context() -> usize {
    512
}
fn d_vocab() -> usize {
    specdec::Vocab::BYTE_SIZE
}
fn d_std() -> f32 {
    0.02
}

impl Default for InitSection {
    fn default() -> Self {
        InitSection { std: d_std(), embed_std: d_std(), copy_gain: 0.0 }
    }
}

impl Default for ModelFile {
    fn default() -> Self {
        ModelFile {
            layers: d_layers(),
            heads: d_heads(),
            dim: d_dim(),
            max_context: d_context(),
            vocab_size: d_vocab(),
            init: InitSection::default(),
        }
    }
}

impl ModelFile {
    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            max_context: self.max_context,
            vocab_size: self.vocab_size,
        }
    }

    pub fn init_options(&self) -> InitOptions {
        InitOptions { std: self.init.std, embed_std: self.init.embed_std, copy_gain: self.init.copy_gain }
    }
}

/// How the draft model is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DraftSpec {
    /// `(1 - lambda) * oracle + lambda * uniform`, charged `param_bytes` per pass
    /// (default: a twentieth of the oracle).
    Aligned { lambda: f64, param_bytes: Option<u64> },
    /// An independent transformer weight file.
    Weights { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    pub oracle: PathBuf,
    pub draft: DraftSpec,
    #[serde(default)]
    pub draft2: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default = "d_budget")]
    pub oracle_budget: usize,
    #[serde(default = "d_children")]
    pub max_children: usize,
    #[serde(default = "d_depth")]
    pub max_depth: usize,
    #[serde(default = "d_chain")]
    pub draft2_chain_len: usize,
}

fn d_budget() -> usize {
    16
}
fn d_children() -> usize {
    3
}
fn d_depth() -> usize {
    8
}
fn d_chain() -> usize {
    4
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection {
            oracle_budget: d_budget(),
            max_children: d_children(),
            max_depth: d_depth(),
            draft2_chain_len: d_chain(),
        }
    }
}

/// A single prompt given inline or read from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum PromptSource {
    Text(String),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    /// Sampling modes to run; every method runs under each.
    #[serde(default = "d_modes")]
    pub modes: Vec<SamplingPolicy>,
    /// Prompt list (one JSON object per line); the bundled list when absent.
    #[serde(default)]
    pub prompts: Option<PathBuf>,
}

fn d_modes() -> Vec<SamplingPolicy> {
    vec![SamplingPolicy::Greedy, SamplingPolicy::topk(8, 1.0)]
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { modes: d_modes(), prompts: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_method")]
    pub method: Method,
    #[serde(default = "d_sampling")]
    pub sampling: SamplingPolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub engine: EngineSection,
    pub models: ModelPaths,
    #[serde(default)]
    pub prompt: Option<PromptSource>,
    #[serde(default)]
    pub bench: BenchSection,
}

fn d_method() -> Method {
    Method::Staged
}
fn d_sampling() -> SamplingPolicy {
    SamplingPolicy::Greedy
}
fn d_max_tokens() -> usize {
    128
}

/// Parse a TOML file into `T`.
pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| anyhow!("invalid config {}: {e}", path.display()))
}

/// Resolve `p` against `base` unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// A loaded run configuration with paths made absolute.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    pub fn load(path: &Path) -> Result<Self> {
        let config: RunConfig = read_toml(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let engine = config.engine_config();
        if let Err(e) = engine.validate(specdec::Vocab::BYTE_SIZE) {
            bail!("invalid config {}: {e}", path.display());
        }
        Ok(Run { config, dir })
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.dir, p)
    }

    pub fn load_models(&self) -> Result<Models> {
        let m = &self.config.models;
        let oracle = Arc::new(Transformer::load(self.path(&m.oracle))?);
        let draft: Box<dyn LanguageModel> = match &m.draft {
            DraftSpec::Aligned { lambda, param_bytes } => {
                let bytes = param_bytes.unwrap_or(oracle.cost().param_bytes / 20);
                let base: Arc<dyn LanguageModel> = oracle.clone();
                Box::new(MixtureModel::new(base, *lambda, ModelCost { param_bytes: bytes })?)
            }
            DraftSpec::Weights { path } => Box::new(Transformer::load(self.path(path))?),
        };
        let draft2 = m.draft2.as_ref().map(|p| KatzTrigram::load(self.path(p))).transpose()?;
        if draft.vocab_size() != oracle.vocab_size() {
            bail!("draft and oracle vocabularies differ");
        }
        Ok(Models { oracle, draft, draft2 })
    }
}

impl RunConfig {
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            oracle_budget: self.engine.oracle_budget,
            max_children: self.engine.max_children,
            max_depth: self.engine.max_depth,
            draft2_chain_len: self.engine.draft2_chain_len,
            policy: self.sampling,
        }
    }
}

pub struct Models {
    pub oracle: Arc<Transformer>,
    pub draft: Box<dyn LanguageModel>,
    pub draft2: Option<KatzTrigram>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_run_config_defaults() {
        let c: RunConfig = toml::from_str(
            r#"
            [models]
            oracle = "oracle.sttf"
            draft = { kind = "aligned", lambda = 0.3 }
            "#,
        )
        .unwrap();
        assert_eq!(c.method, Method::Staged);
        assert_eq!(c.sampling, SamplingPolicy::Greedy);
        assert_eq!(c.engine, EngineSection::default());
        assert_eq!(c.bench.modes.len(), 2);
    }

    #[test]
    fn sampling_and_prompt_forms() {
        let c: RunConfig = toml::from_str(
            r#"
            method = "speculative"
            sampling = { mode = "topk", k = 4, temperature = 0.7 }
            prompt = { text = "hi" }
            [models]
            oracle = "o"
            draft = { kind = "weights", path = "d" }
            draft2 = "n.katz"
            "#,
        )
        .unwrap();
        assert_eq!(c.sampling, SamplingPolicy::topk(4, 0.7));
        assert_eq!(c.prompt, Some(PromptSource::Text("hi".into())));
        assert_eq!(c.models.draft, DraftSpec::Weights { path: "d".into() });
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: std::result::Result<ModelFile, _> = toml::from_str("layerz = 3");
        assert!(r.is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        assert_eq!(resolve(Path::new("/cfg"), Path::new("m.sttf")), PathBuf::from("/cfg/m.sttf"));
        assert_eq!(resolve(Path::new("/cfg"), Path::new("/abs/m")), PathBuf::from("/abs/m"));
    }
}
