//! The decode loop: build a speculative tree, verify it with one oracle forward pass,
//! walk it with the acceptance rules, and commit the accepted path to every stage.
//!
//! Every stage keeps the committed tokens in its cache except the most recent one,
//! the root. Each oracle batch starts with the root, so the logits at the root are
//! the distribution of the first new token.

mod build;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::accept::{accept_walk, Emission};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelState};
use crate::rng::{Randomness, Role, SeededRandomness};
use crate::sampling::{warp_logits, SamplingPolicy};
use crate::tree::{tree_mask, SpecTree, StageTag};
use crate::vocab::TokenId;

use build::Builder;

/// Decoding method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// One oracle forward pass per token.
    Baseline,
    /// Draft proposes a single chain; no draft² stage.
    Speculative,
    /// Tree-structured batches with draft² speculation inside the draft.
    Staged,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::Speculative, Method::Staged];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Speculative => "speculative",
            Method::Staged => "staged",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "speculative" => Ok(Method::Speculative),
            "staged" => Ok(Method::Staged),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// Tree-shape knobs and the sampling policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Maximum nodes per oracle batch, root included.
    pub oracle_budget: usize,
    /// Maximum candidates per node.
    pub max_children: usize,
    /// Maximum depth of the speculative tree.
    pub max_depth: usize,
    /// Length of the greedy chains draft² proposes.
    pub draft2_chain_len: usize,
    pub policy: SamplingPolicy,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            oracle_budget: 16,
            max_children: 3,
            max_depth: 8,
            draft2_chain_len: 4,
            policy: SamplingPolicy::Greedy,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.oracle_budget < 1 {
            return Err(Error::InvalidConfig("oracle_budget must be at least 1".into()));
        }
        if self.max_children < 1 {
            return Err(Error::InvalidConfig("max_children must be at least 1".into()));
        }
        self.policy.validate(vocab_size).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// Per-stage counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub oracle: usize,
    pub draft: usize,
    pub draft2: usize,
}

impl StageCounts {
    pub fn get(&self, stage: StageTag) -> usize {
        match stage {
            StageTag::Oracle => self.oracle,
            StageTag::Draft => self.draft,
            StageTag::Draft2 => self.draft2,
        }
    }

    pub fn add(&mut self, other: &StageCounts) {
        self.oracle += other.oracle;
        self.draft += other.draft;
        self.draft2 += other.draft2;
    }
}

/// What one oracle step did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub emitted: Vec<Emission>,
    /// Nodes in the oracle batch.
    pub tree_size: usize,
    pub tree_depth: usize,
    /// Accepted speculative tokens (emitted minus the bonus or correction token).
    pub accepted_len: usize,
    /// Whether the walk stopped at a node that had candidates, all rejected.
    pub rejected: bool,
    pub forwards: StageCounts,
    pub nodes_evaluated: StageCounts,
    /// Tree nodes the draft evaluated while building.
    #[serde(skip)]
    pub draft_evaluated: Vec<usize>,
    /// The tree the oracle verified.
    #[serde(skip)]
    pub tree: Option<SpecTree>,
}

/// Cache state of a proposing stage plus committed tokens it has not cached yet.
#[derive(Debug, Clone, PartialEq)]
pub struct StageState {
    pub state: ModelState,
    pub pending: Vec<TokenId>,
}

/// Decoding state of one sequence across all stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    oracle: ModelState,
    draft: Option<StageState>,
    draft2: Option<StageState>,
    root: TokenId,
    history: Vec<TokenId>,
}

impl Session {
    /// Prompt followed by everything emitted so far.
    pub fn history(&self) -> &[TokenId] {
        &self.history
    }

    pub fn root(&self) -> TokenId {
        self.root
    }

    pub fn oracle_state(&self) -> &ModelState {
        &self.oracle
    }

    pub fn draft_state(&self) -> Option<&StageState> {
        self.draft.as_ref()
    }

    pub fn draft2_state(&self) -> Option<&StageState> {
        self.draft2.as_ref()
    }
}

/// Output of [`Engine::generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub origins: Vec<StageTag>,
    pub steps: Vec<StepResult>,
}

/// A decoding method bound to its models.
#[derive(Clone, Copy)]
pub struct Engine<'m> {
    method: Method,
    config: EngineConfig,
    oracle: &'m dyn LanguageModel,
    draft: Option<&'m dyn LanguageModel>,
    draft2: Option<&'m dyn LanguageModel>,
}

impl<'m> Engine<'m> {
    /// Bind models to a method. Speculative decoding forces single-child chains and
    /// drops draft²; baseline ignores both proposers. Staged decoding without draft²
    /// is plain tree speculation.
    pub fn new(
        method: Method,
        mut config: EngineConfig,
        oracle: &'m dyn LanguageModel,
        draft: Option<&'m dyn LanguageModel>,
        draft2: Option<&'m dyn LanguageModel>,
    ) -> Result<Self> {
        let vocab = oracle.vocab_size();
        config.validate(vocab)?;
        for m in draft.iter().chain(draft2.iter()) {
            if m.vocab_size() != vocab {
                return Err(Error::InvalidConfig(format!(
                    "{} has vocabulary {} but the oracle has {vocab}",
                    m.name(),
                    m.vocab_size()
                )));
            }
        }
        let (draft, draft2) = match method {
            Method::Baseline => (None, None),
            Method::Speculative => {
                config.max_children = 1;
                config.draft2_chain_len = 0;
                (Some(draft.ok_or_else(|| missing("speculative"))?), None)
            }
            Method::Staged => (Some(draft.ok_or_else(|| missing("staged"))?), draft2),
        };
        Ok(Engine { method, config, oracle, draft, draft2 })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    /// Effective configuration after method-specific overrides.
    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn oracle(&self) -> &'m dyn LanguageModel {
        self.oracle
    }

    pub fn draft(&self) -> Option<&'m dyn LanguageModel> {
        self.draft
    }

    pub fn draft2(&self) -> Option<&'m dyn LanguageModel> {
        self.draft2
    }

    /// Prefill every stage with all prompt tokens but the last, which becomes the root.
    pub fn start(&self, prompt: &[TokenId]) -> Result<Session> {
        let (&root, head) = prompt
            .split_last()
            .ok_or_else(|| Error::InvalidArgument("prompt must not be empty".into()))?;
        let vocab = self.oracle.vocab_size();
        if let Some(t) = prompt.iter().find(|t| t.index() >= vocab) {
            return Err(Error::InvalidArgument(format!("prompt token {t} outside vocabulary")));
        }
        let limit = self.context_limit();
        if prompt.len() > limit {
            return Err(Error::ContextOverflow { position: prompt.len() - 1, max_context: limit });
        }
        let prefill = |m: &dyn LanguageModel| {
            if head.is_empty() {
                Ok(m.new_state())
            } else {
                m.prefill(head)
            }
        };
        let stage = |m: &dyn LanguageModel| -> Result<StageState> {
            Ok(StageState { state: prefill(m)?, pending: Vec::new() })
        };
        Ok(Session {
            oracle: prefill(self.oracle)?,
            draft: self.draft.map(stage).transpose()?,
            draft2: self.draft2.map(stage).transpose()?,
            root,
            history: prompt.to_vec(),
        })
    }

    fn context_limit(&self) -> usize {
        [Some(self.oracle), self.draft, self.draft2]
            .into_iter()
            .flatten()
            .map(|m| m.max_context())
            .min()
            .expect("oracle present")
    }

    /// One oracle step emitting at most `remaining` tokens (at least one).
    pub fn step(&self, session: &mut Session, remaining: usize, rng: &mut dyn Randomness) -> Result<StepResult> {
        if remaining == 0 {
            return Err(Error::InvalidArgument("step needs room for at least one token".into()));
        }
        let root_pos = session.oracle.len();
        let limit = self.context_limit();
        if root_pos >= limit {
            return Err(Error::ContextOverflow { position: root_pos, max_context: limit });
        }
        let target_depth = self
            .config
            .max_depth
            .min(self.config.oracle_budget - 1)
            .min(remaining - 1)
            .min(limit - 1 - root_pos);

        let mut forwards = StageCounts::default();
        let mut nodes = StageCounts::default();
        let (tree, draft_evaluated) = match (self.draft, session.draft.as_mut()) {
            (Some(draft), Some(draft_state)) if target_depth > 0 => {
                let builder = Builder {
                    draft,
                    draft2: self.draft2,
                    policy: self.config.policy,
                    budget: self.config.oracle_budget,
                    max_children: self.config.max_children,
                    chain_len: self.config.draft2_chain_len,
                    target_depth,
                };
                let (tree, stats) = builder.build(
                    session.root,
                    draft_state,
                    session.draft2.as_mut(),
                    rng.stream(Role::TreeBuild),
                )?;
                forwards.draft = stats.draft_forwards;
                forwards.draft2 = stats.draft2_forwards;
                nodes.draft = stats.draft_nodes;
                nodes.draft2 = stats.draft2_nodes;
                (tree, stats.draft_evaluated)
            }
            _ => (SpecTree::new(session.root), Vec::new()),
        };

        let batch = tree_mask(&tree, root_pos)?;
        let logits = self.oracle.decode_tree(&mut session.oracle, &batch)?;
        forwards.oracle = 1;
        nodes.oracle = batch.len();
        let dists: Vec<_> = logits.iter().map(|l| warp_logits(l, &self.config.policy)).collect();
        let walk = accept_walk(&tree, &dists, &self.config.policy, rng)?;
        self.oracle.commit(&mut session.oracle, &walk.chain)?;

        let committed: Vec<TokenId> = walk.chain.iter().map(|&i| tree.node(i).token).collect();
        for stage in [session.draft.as_mut(), session.draft2.as_mut()].into_iter().flatten() {
            stage.pending.extend_from_slice(&committed);
        }
        session.root = walk.emitted.last().expect("walk emits at least one token").token;
        session.history.extend(walk.emitted.iter().map(|e| e.token));

        Ok(StepResult {
            accepted_len: walk.accepted_len(),
            rejected: !tree.node(walk.stop).candidates.is_empty(),
            emitted: walk.emitted,
            tree_size: tree.len(),
            tree_depth: tree.max_depth(),
            forwards,
            nodes_evaluated: nodes,
            draft_evaluated,
            tree: Some(tree),
        })
    }

    /// Decode up to `max_tokens` tokens after `prompt`, stopping early at EOS.
    pub fn generate(&self, prompt: &[TokenId], max_tokens: usize, seed: u64) -> Result<Generation> {
        self.generate_with(prompt, max_tokens, &mut SeededRandomness::new(seed))
    }

    pub fn generate_with(
        &self,
        prompt: &[TokenId],
        max_tokens: usize,
        rng: &mut dyn Randomness,
    ) -> Result<Generation> {
        if max_tokens == 0 {
            return Err(Error::InvalidArgument("max_tokens must be at least 1".into()));
        }
        let eos = (self.oracle.vocab_size() > TokenId::EOS.index()).then_some(TokenId::EOS);
        let mut session = self.start(prompt)?;
        let mut out = Generation { prompt: prompt.to_vec(), tokens: Vec::new(), origins: Vec::new(), steps: Vec::new() };
        while out.tokens.len() < max_tokens {
            let mut step = self.step(&mut session, max_tokens - out.tokens.len(), rng)?;
            let stop = eos.and_then(|e| step.emitted.iter().position(|x| x.token == e));
            if let Some(i) = stop {
                step.emitted.truncate(i + 1);
                step.accepted_len = step.accepted_len.min(i + 1);
            }
            out.tokens.extend(step.emitted.iter().map(|e| e.token));
            out.origins.extend(step.emitted.iter().map(|e| e.origin));
            out.steps.push(step);
            if stop.is_some() {
                break;
            }
        }
        Ok(out)
    }
}

fn missing(method: &str) -> Error {
    Error::InvalidConfig(format!("{method} decoding needs a draft model"))
}
