//! Level-synchronous construction of a speculative tree by the draft model, with the
//! draft's own decoding sped up by greedy draft² chains.
//!
//! A spine of first children is always grown to the target depth; every other node
//! is added only while the budget still covers the rest of the spine. Each round
//! evaluates the frontier (and its draft² chains) in a single draft forward pass and
//! extends the spine by at least one node, so the number of rounds never exceeds the
//! depth of the finished tree.

use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::rng::Chance;
use crate::sampling::{softmax, warp_logits, LogitVector, ProbVector, SamplingPolicy};
use crate::tree::{SpecTree, StageTag, TreeBatch};
use crate::vocab::TokenId;

use super::StageState;

/// Per-step counters collected while building.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct BuildStats {
    pub draft_forwards: usize,
    pub draft_nodes: usize,
    pub draft2_forwards: usize,
    pub draft2_nodes: usize,
    /// Tree nodes whose draft outputs were computed, over all rounds.
    pub draft_evaluated: Vec<usize>,
}

pub(crate) struct Builder<'a> {
    pub draft: &'a dyn LanguageModel,
    pub draft2: Option<&'a dyn LanguageModel>,
    pub policy: SamplingPolicy,
    pub budget: usize,
    pub max_children: usize,
    pub chain_len: usize,
    pub target_depth: usize,
}

/// Flattened batch of `pending` tokens, a parent-closed subset of tree nodes and
/// chains hanging off some of those nodes.
struct Layout {
    batch: TreeBatch,
    pending: usize,
    tree_index: Vec<Option<usize>>,
    chain_index: Vec<Vec<usize>>,
}

fn layout(
    prefix_len: usize,
    pending: &[TokenId],
    tree: &SpecTree,
    include: &[usize],
    chains: &[(usize, &[TokenId])],
) -> Result<Layout> {
    let mut tokens = pending.to_vec();
    let mut parents: Vec<Option<usize>> = (0..pending.len()).map(|i| i.checked_sub(1)).collect();
    let mut tree_index = vec![None; tree.len()];
    for &i in include {
        let node = tree.node(i);
        let parent = match node.parent {
            None => pending.len().checked_sub(1),
            Some(p) => Some(tree_index[p].ok_or_else(|| {
                Error::Internal(format!("tree node {i} included without its parent"))
            })?),
        };
        tree_index[i] = Some(tokens.len());
        tokens.push(node.token);
        parents.push(parent);
    }
    let mut chain_index = Vec::with_capacity(chains.len());
    for &(anchor, chain) in chains {
        let mut parent = tree_index[anchor]
            .ok_or_else(|| Error::Internal(format!("chain anchor {anchor} not in batch")))?;
        let mut idx = Vec::with_capacity(chain.len());
        for &t in chain {
            idx.push(tokens.len());
            tokens.push(t);
            parents.push(Some(parent));
            parent = tokens.len() - 1;
        }
        chain_index.push(idx);
    }
    Ok(Layout {
        batch: TreeBatch::from_parents(tokens, parents, prefix_len)?,
        pending: pending.len(),
        tree_index,
        chain_index,
    })
}

/// Decode a layout on a stage and fold its pending tokens into the persistent cache.
fn run_stage(model: &dyn LanguageModel, stage: &mut StageState, layout: &Layout) -> Result<Vec<LogitVector>> {
    let logits = model.decode_tree(&mut stage.state, &layout.batch)?;
    let committed: Vec<usize> = (0..layout.pending).collect();
    model.commit(&mut stage.state, &committed)?;
    stage.pending.clear();
    Ok(logits)
}

/// Frontier nodes plus all their ancestors, in tree order.
fn ancestor_closure(tree: &SpecTree, frontier: &[usize]) -> Vec<usize> {
    let mut keep = vec![false; tree.len()];
    for &f in frontier {
        let mut cur = Some(f);
        while let Some(i) = cur {
            if keep[i] {
                break;
            }
            keep[i] = true;
            cur = tree.node(i).parent;
        }
    }
    (0..tree.len()).filter(|&i| keep[i]).collect()
}

impl Builder<'_> {
    fn reserve(&self, tree: &SpecTree, spine_tip: usize) -> usize {
        self.target_depth - tree.node(spine_tip).depth
    }

    /// Whether a node off the spine may be added without starving the spine.
    fn has_room(&self, tree: &SpecTree, spine_tip: usize) -> bool {
        tree.len() + self.reserve(tree, spine_tip) < self.budget
    }

    /// Distribution stored on a node: the raw draft distribution in greedy mode (so
    /// lower-ranked alternatives are visible), the warped one otherwise.
    fn node_dist(&self, logits: &LogitVector) -> Result<ProbVector> {
        if self.policy.is_greedy() {
            softmax(logits, 1.0)
        } else {
            Ok(warp_logits(logits, &self.policy))
        }
    }

    pub fn build(
        &self,
        root: TokenId,
        draft: &mut StageState,
        mut draft2: Option<&mut StageState>,
        chance: &mut dyn Chance,
    ) -> Result<(SpecTree, BuildStats)> {
        let mut tree = SpecTree::new(root);
        let mut stats = BuildStats::default();
        let mut spine_tip = 0;
        while tree.node(spine_tip).depth < self.target_depth {
            let frontier = self.frontier(&tree, spine_tip);
            let allowance = self.budget.saturating_sub(tree.len() + self.reserve(&tree, spine_tip));
            let mut lens = Vec::with_capacity(frontier.len());
            let mut spent = 0;
            for &f in &frontier {
                let depth_left = self.target_depth - tree.node(f).depth;
                let mut len = self.chain_len.min(depth_left);
                if f != spine_tip {
                    len = len.min(allowance.saturating_sub(spent));
                    spent += len;
                }
                lens.push(if self.draft2.is_some() { len } else { 0 });
            }

            let chains = match (self.draft2, draft2.as_deref_mut()) {
                (Some(model), Some(stage)) if lens.iter().any(|&l| l > 0) => {
                    self.propose_chains(model, stage, &tree, &frontier, &lens, &mut stats)?
                }
                _ => vec![Vec::new(); frontier.len()],
            };

            let include = ancestor_closure(&tree, &frontier);
            let anchored: Vec<(usize, &[TokenId])> =
                frontier.iter().zip(&chains).map(|(&f, c)| (f, c.as_slice())).collect();
            let lay = layout(draft.state.len(), &draft.pending, &tree, &include, &anchored)?;
            let logits = run_stage(self.draft, draft, &lay)?;
            stats.draft_forwards += 1;
            stats.draft_nodes += lay.batch.len();
            stats.draft_evaluated.extend(&include);

            for (k, &f) in frontier.iter().enumerate() {
                let dists = chain_dists(self, &logits, &lay, f, k)?;
                spine_tip = self.grow_from(&mut tree, f, &chains[k], dists, spine_tip, chance)?;
            }
            self.add_extras(&mut tree, spine_tip, chance)?;
        }
        Ok((tree, stats))
    }

    /// Spine tip first, then other unevaluated expandable nodes by draft probability,
    /// as many as the remaining budget could give a child.
    fn frontier(&self, tree: &SpecTree, spine_tip: usize) -> Vec<usize> {
        let mut others: Vec<usize> = (0..tree.len())
            .filter(|&i| {
                i != spine_tip && tree.node(i).draft_dist.is_none() && tree.node(i).depth < self.target_depth
            })
            .collect();
        others.sort_by(|&a, &b| tree.node(b).cum_logq.total_cmp(&tree.node(a).cum_logq).then(a.cmp(&b)));
        let room = self.budget.saturating_sub(tree.len() + self.reserve(tree, spine_tip));
        others.truncate(room);
        std::iter::once(spine_tip).chain(others).collect()
    }

    fn propose_chains(
        &self,
        model: &dyn LanguageModel,
        stage: &mut StageState,
        tree: &SpecTree,
        frontier: &[usize],
        lens: &[usize],
        stats: &mut BuildStats,
    ) -> Result<Vec<Vec<TokenId>>> {
        let include = ancestor_closure(tree, frontier);
        let mut chains: Vec<Vec<TokenId>> = vec![Vec::new(); frontier.len()];
        let longest = lens.iter().copied().max().unwrap_or(0);
        for _ in 0..longest {
            let anchored: Vec<(usize, &[TokenId])> =
                frontier.iter().zip(&chains).map(|(&f, c)| (f, c.as_slice())).collect();
            let lay = layout(stage.state.len(), &stage.pending, tree, &include, &anchored)?;
            let logits = run_stage(model, stage, &lay)?;
            stats.draft2_forwards += 1;
            stats.draft2_nodes += lay.batch.len();
            for (k, &f) in frontier.iter().enumerate() {
                if chains[k].len() < lens[k] {
                    let tip = match lay.chain_index[k].last() {
                        Some(&i) => i,
                        None => lay.tree_index[f].expect("frontier in batch"),
                    };
                    chains[k].push(logits[tip].argmax());
                }
            }
        }
        Ok(chains)
    }

    /// Give `f` its first child, verifying the draft² chain against the draft. Chain
    /// tokens that survive join as draft² proposals; the first mismatch is replaced by
    /// a draft proposal and ends the chain. Returns the new spine tip.
    fn grow_from(
        &self,
        tree: &mut SpecTree,
        f: usize,
        chain: &[TokenId],
        dists: Vec<ProbVector>,
        mut spine_tip: usize,
        chance: &mut dyn Chance,
    ) -> Result<usize> {
        let mut dists = dists.into_iter();
        let mut cur = f;
        tree.node_mut(cur).draft_dist = dists.next();
        for j in 0..=chain.len() {
            let on_spine = cur == spine_tip;
            if tree.node(cur).depth >= self.target_depth || !(on_spine || self.has_room(tree, spine_tip)) {
                break;
            }
            let q = tree.node(cur).draft_dist.clone().expect("evaluated node");
            let (token, proposer) = match chain.get(j) {
                Some(&c) if self.verify(&q, c, chance) => (c, StageTag::Draft2),
                Some(&c) => (self.correction(&q, c, chance)?, StageTag::Draft),
                None => (self.first_choice(&q, chance), StageTag::Draft),
            };
            let (idx, _) = tree.add_candidate(cur, token, q.prob(token).ln(), proposer);
            if on_spine {
                spine_tip = idx;
            }
            if proposer != StageTag::Draft2 {
                break;
            }
            tree.node_mut(idx).draft_dist = dists.next();
            cur = idx;
        }
        Ok(spine_tip)
    }

    fn verify(&self, q: &ProbVector, c: TokenId, chance: &mut dyn Chance) -> bool {
        if self.policy.is_greedy() {
            q.argmax() == c
        } else {
            let qc = q.prob(c);
            qc > 0.0 && chance.bernoulli(qc)
        }
    }

    /// Draft proposal after rejecting chain token `c`: the argmax in greedy mode, a
    /// draw from `q` with `c` removed otherwise. Together with the acceptance coin
    /// this makes the child an exact draw from `q`.
    fn correction(&self, q: &ProbVector, c: TokenId, chance: &mut dyn Chance) -> Result<TokenId> {
        if self.policy.is_greedy() {
            return Ok(q.argmax());
        }
        let mut w = q.values().to_vec();
        w[c.index()] = 0.0;
        Ok(chance.categorical(&ProbVector::normalized(w)?))
    }

    fn first_choice(&self, q: &ProbVector, chance: &mut dyn Chance) -> TokenId {
        if self.policy.is_greedy() {
            q.argmax()
        } else {
            chance.categorical(q)
        }
    }

    /// Fill remaining budget with further children of evaluated nodes, best first.
    fn add_extras(&self, tree: &mut SpecTree, spine_tip: usize, chance: &mut dyn Chance) -> Result<()> {
        if self.max_children < 2 {
            return Ok(());
        }
        while self.has_room(tree, spine_tip) {
            let mut best: Option<(f64, usize)> = None;
            for i in 0..tree.len() {
                if let Some(score) = self.extra_priority(tree, i) {
                    if best.is_none_or(|(s, _)| score > s) {
                        best = Some((score, i));
                    }
                }
            }
            let Some((_, n)) = best else { break };
            let q = tree.node(n).draft_dist.clone().expect("evaluated node");
            let token = if self.policy.is_greedy() {
                q.ranked()
                    .into_iter()
                    .find(|&t| tree.child_with_token(n, t).is_none())
                    .expect("priority guarantees an unused token")
            } else {
                chance.categorical(&q)
            };
            tree.add_candidate(n, token, q.prob(token).ln(), StageTag::Draft);
        }
        Ok(())
    }

    /// Log-probability mass an extra child of `i` would add, if it may get one.
    ///
    /// Greedy: the next-ranked unused token. Stochastic: the draft mass not yet
    /// covered by existing children, which does not depend on the value drawn next.
    fn extra_priority(&self, tree: &SpecTree, i: usize) -> Option<f64> {
        let node = tree.node(i);
        let q = node.draft_dist.as_ref()?;
        if node.depth >= self.target_depth || node.candidates.is_empty() {
            return None;
        }
        let used = if self.policy.is_greedy() { node.children.len() } else { node.candidates.len() };
        if used >= self.max_children {
            return None;
        }
        let covered: f64 = node.children.iter().map(|&c| q.prob(tree.node(c).token)).sum();
        let gain = if self.policy.is_greedy() {
            q.ranked()
                .into_iter()
                .find(|&t| tree.child_with_token(i, t).is_none())
                .map(|t| q.prob(t))
                .unwrap_or(0.0)
        } else {
            1.0 - covered
        };
        (gain > 1e-12).then(|| node.cum_logq + gain.ln())
    }
}

/// Distributions for frontier node `f` and each node of its chain, in chain order.
fn chain_dists(b: &Builder<'_>, logits: &[LogitVector], lay: &Layout, f: usize, k: usize) -> Result<Vec<ProbVector>> {
    let mut out = Vec::with_capacity(1 + lay.chain_index[k].len());
    out.push(b.node_dist(&logits[lay.tree_index[f].expect("frontier in batch")])?);
    for &i in &lay.chain_index[k] {
        out.push(b.node_dist(&logits[i])?);
    }
    Ok(out)
}
