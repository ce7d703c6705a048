//! Per-token agreement between a draft and its oracle.

use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelState};
use crate::rng::{sample, RandomStream};
use crate::sampling::{warp_logits, ProbVector, SamplingPolicy};
use crate::tree::TreeBatch;
use crate::vocab::TokenId;

/// Per-token acceptance probability of a single draft proposal: `1` or `0` for
/// argmax agreement under greedy, `sum_x min(p(x), q(x))` under sampling.
pub fn token_agreement(p: &ProbVector, q: &ProbVector, policy: &SamplingPolicy) -> f64 {
    if policy.is_greedy() {
        f64::from(u8::from(p.argmax() == q.argmax()))
    } else {
        p.values().iter().zip(q.values()).map(|(a, b)| a.min(*b)).sum()
    }
}

/// Mean per-token agreement over `num_samples` positions of text sampled from the
/// oracle (under `policy`) after `prompt`. Sequences restart from the prompt when
/// the context fills up.
pub fn agreement_rate(
    oracle: &dyn LanguageModel,
    draft: &dyn LanguageModel,
    prompt: &[TokenId],
    policy: &SamplingPolicy,
    num_samples: usize,
    seed: u64,
) -> Result<f64> {
    if num_samples == 0 {
        return Err(Error::InvalidArgument("num_samples must be at least 1".into()));
    }
    let limit = oracle.max_context().min(draft.max_context());
    if prompt.is_empty() || prompt.len() >= limit {
        return Err(Error::InvalidArgument("prompt must be non-empty and leave room to decode".into()));
    }
    let mut rng = RandomStream::derived(seed, "agreement");
    let mut total = 0.0;
    let mut states: Option<(ModelState, ModelState)> = None;
    for _ in 0..num_samples {
        let (so, sd) = match states.as_mut() {
            Some(s) if s.0.len() < limit => s,
            _ => states.insert((oracle.prefill(prompt)?, draft.prefill(prompt)?)),
        };
        let p = warp_logits(so.last_logits().expect("prefilled"), policy);
        let q = warp_logits(sd.last_logits().expect("prefilled"), policy);
        total += token_agreement(&p, &q, policy);
        let t = sample(&p, &mut rng);
        for (m, s) in [(oracle, &mut *so), (draft, &mut *sd)] {
            let batch = TreeBatch::chain(vec![t], s.len())?;
            m.decode_tree(s, &batch)?;
            m.commit(s, &[0])?;
        }
    }
    Ok(total / num_samples as f64)
}
