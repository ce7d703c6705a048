//! Acceptance rules that turn oracle distributions over a speculative tree into
//! emitted tokens without changing the oracle's (warped) output distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Randomness, Role};
use crate::sampling::{ProbVector, SamplingPolicy};
use crate::tree::{SpecTree, StageTag};
use crate::vocab::TokenId;

/// A proposed token and the stage that proposed it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub token: TokenId,
    pub proposer: StageTag,
}

/// Result of running an acceptance rule at one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AcceptOutcome {
    /// Index into the candidate list of the accepted candidate.
    pub accepted: Option<usize>,
    pub emitted: TokenId,
    pub origin: StageTag,
}

/// Accept the first candidate equal to the oracle's argmax, or emit the argmax itself.
pub fn greedy_accept_node(p_argmax: TokenId, candidates: &[Candidate]) -> AcceptOutcome {
    match candidates.iter().position(|c| c.token == p_argmax) {
        Some(i) => AcceptOutcome { accepted: Some(i), emitted: p_argmax, origin: candidates[i].proposer },
        None => AcceptOutcome { accepted: None, emitted: p_argmax, origin: StageTag::Oracle },
    }
}

/// Sequential residual acceptance over candidates drawn i.i.d. from `q`.
///
/// Candidate `x` is accepted with probability `min(1, p(x) / q(x))`; after each
/// rejection `p` becomes `normalize(max(0, p - q))`. Candidates with `q(x) = 0` are
/// rejected without a coin. If every candidate is rejected, the emitted token is
/// drawn from the final residual.
pub fn residual_accept_node(
    p: &ProbVector,
    q: &ProbVector,
    candidates: &[Candidate],
    rng: &mut dyn Randomness,
) -> Result<AcceptOutcome> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "oracle and draft distributions differ in length ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let mut residual = p.clone();
    for (i, c) in candidates.iter().enumerate() {
        let qx = q.prob(c.token);
        if qx == 0.0 {
            continue;
        }
        let ratio = (residual.prob(c.token) / qx).min(1.0);
        if rng.stream(Role::Acceptance).bernoulli(ratio) {
            return Ok(AcceptOutcome { accepted: Some(i), emitted: c.token, origin: c.proposer });
        }
        residual = residual_after_reject(&residual, q)?;
    }
    let emitted = rng.stream(Role::Fallback).categorical(&residual);
    Ok(AcceptOutcome { accepted: None, emitted, origin: StageTag::Oracle })
}

/// `normalize(max(0, p - q))`.
pub fn residual_after_reject(p: &ProbVector, q: &ProbVector) -> Result<ProbVector> {
    let diff: Vec<f64> = p.values().iter().zip(q.values()).map(|(a, b)| (a - b).max(0.0)).collect();
    if diff.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Internal("residual distribution has no mass".into()));
    }
    ProbVector::normalized(diff)
}

/// One emitted token and the stage it originated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    pub token: TokenId,
    pub origin: StageTag,
}

/// Outcome of walking a tree from the root.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkResult {
    /// Accepted tokens followed by the bonus or correction token.
    pub emitted: Vec<Emission>,
    /// Root-to-last-accepted chain of node indices, root included.
    pub chain: Vec<usize>,
    /// Node at which the walk stopped (last element of `chain`).
    pub stop: usize,
}

impl WalkResult {
    pub fn accepted_len(&self) -> usize {
        self.chain.len() - 1
    }
}

/// Walk from the root, accepting children with the rule matching `policy`, until a
/// node rejects all its children or has none. The stop node always emits one token
/// drawn from the oracle (or its residual), tagged as oracle.
///
/// `oracle_dists[i]` is the warped oracle distribution at node `i`. In stochastic mode
/// every node with candidates must carry the draft distribution they were drawn from.
pub fn accept_walk(
    tree: &SpecTree,
    oracle_dists: &[ProbVector],
    policy: &SamplingPolicy,
    rng: &mut dyn Randomness,
) -> Result<WalkResult> {
    if oracle_dists.len() != tree.len() {
        return Err(Error::InvalidArgument(format!(
            "{} oracle distributions for {} tree nodes",
            oracle_dists.len(),
            tree.len()
        )));
    }
    let mut chain = vec![0];
    let mut emitted = Vec::new();
    let mut node = 0;
    loop {
        let n = tree.node(node);
        let candidates: Vec<Candidate> = n
            .candidates
            .iter()
            .map(|&c| Candidate { token: tree.node(c).token, proposer: tree.node(c).proposer })
            .collect();
        let p = &oracle_dists[node];
        let outcome = if policy.is_greedy() {
            greedy_accept_node(p.argmax(), &candidates)
        } else if candidates.is_empty() {
            let token = rng.stream(Role::Fallback).categorical(p);
            AcceptOutcome { accepted: None, emitted: token, origin: StageTag::Oracle }
        } else {
            let q = n.draft_dist.as_ref().ok_or_else(|| {
                Error::Internal(format!("node {node} has candidates but no draft distribution"))
            })?;
            residual_accept_node(p, q, &candidates, rng)?
        };
        emitted.push(Emission { token: outcome.emitted, origin: outcome.origin });
        match outcome.accepted {
            Some(i) => {
                node = n.candidates[i];
                chain.push(node);
            }
            None => return Ok(WalkResult { emitted, chain, stop: node }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRandomness;

    const T: TokenId = TokenId(0);
    const U: TokenId = TokenId(1);
    const V: TokenId = TokenId(2);

    fn cand(t: TokenId) -> Candidate {
        Candidate { token: t, proposer: StageTag::Draft }
    }

    #[test]
    fn greedy_examples() {
        let o = greedy_accept_node(T, &[cand(T), cand(U)]);
        assert_eq!((o.accepted, o.emitted), (Some(0), T));
        let o = greedy_accept_node(V, &[cand(T), cand(U)]);
        assert_eq!((o.accepted, o.emitted, o.origin), (None, V, StageTag::Oracle));
        let o = greedy_accept_node(T, &[cand(U), cand(T)]);
        assert_eq!(o.accepted, Some(1));
    }

    #[test]
    fn equal_distributions_always_accept() {
        let p = ProbVector::new(vec![0.3, 0.7, 0.0]).unwrap();
        let mut rng = SeededRandomness::new(5);
        for _ in 0..1000 {
            for t in [T, U] {
                let o = residual_accept_node(&p, &p, &[cand(t)], &mut rng).unwrap();
                assert_eq!(o.accepted, Some(0));
            }
        }
    }

    #[test]
    fn zero_draft_mass_candidate_is_rejected() {
        let p = ProbVector::new(vec![0.0, 0.25, 0.75]).unwrap();
        let q = ProbVector::point_mass(3, T);
        let mut rng = SeededRandomness::new(1);
        let mut hits = [0u32; 3];
        for _ in 0..4000 {
            let o = residual_accept_node(&p, &q, &[cand(T)], &mut rng).unwrap();
            assert_eq!(o.accepted, None);
            hits[o.emitted.index()] += 1;
        }
        assert_eq!(hits[0], 0);
        assert!(hits[2] > 2 * hits[1]);
    }

    #[test]
    fn walk_on_chain_with_full_agreement_emits_bonus() {
        let mut tree = SpecTree::new(V);
        let (a, _) = tree.add_candidate(0, T, 0.0, StageTag::Draft);
        tree.add_candidate(a, U, 0.0, StageTag::Draft2);
        let dists = vec![
            ProbVector::point_mass(3, T),
            ProbVector::point_mass(3, U),
            ProbVector::point_mass(3, V),
        ];
        let mut rng = SeededRandomness::new(0);
        let w = accept_walk(&tree, &dists, &SamplingPolicy::Greedy, &mut rng).unwrap();
        let tokens: Vec<TokenId> = w.emitted.iter().map(|e| e.token).collect();
        assert_eq!(tokens, vec![T, U, V]);
        let origins: Vec<StageTag> = w.emitted.iter().map(|e| e.origin).collect();
        assert_eq!(origins, vec![StageTag::Draft, StageTag::Draft2, StageTag::Oracle]);
        assert_eq!(w.chain, vec![0, 1, 2]);
    }

    #[test]
    fn walk_immediate_rejection_emits_one_oracle_token() {
        let mut tree = SpecTree::new(V);
        tree.add_candidate(0, T, 0.0, StageTag::Draft);
        let dists = vec![ProbVector::point_mass(3, U), ProbVector::point_mass(3, V)];
        let mut rng = SeededRandomness::new(0);
        let w = accept_walk(&tree, &dists, &SamplingPolicy::Greedy, &mut rng).unwrap();
        assert_eq!(w.emitted, vec![Emission { token: U, origin: StageTag::Oracle }]);
        assert_eq!(w.chain, vec![0]);
    }

    #[test]
    fn walk_descends_into_second_child() {
        let mut tree = SpecTree::new(V);
        tree.add_candidate(0, T, 0.0, StageTag::Draft);
        tree.add_candidate(0, U, 0.0, StageTag::Draft);
        let dists = vec![
            ProbVector::point_mass(3, U),
            ProbVector::point_mass(3, T),
            ProbVector::point_mass(3, V),
        ];
        let mut rng = SeededRandomness::new(0);
        let w = accept_walk(&tree, &dists, &SamplingPolicy::Greedy, &mut rng).unwrap();
        let tokens: Vec<TokenId> = w.emitted.iter().map(|e| e.token).collect();
        assert_eq!(tokens, vec![U, V]);
        assert_eq!(w.stop, 2);
    }
}
