//! Exact distributions by enumerating every random decision.
//!
//! [`enumerate`] re-runs a randomized computation once per distinct sequence of
//! decisions (depth-first, pruning zero-probability branches) and weighs each run by
//! the exact rational product of its branch probabilities.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::rng::{Chance, Randomness, Role};
use crate::sampling::ProbVector;
use crate::vocab::TokenId;

/// Exact rational value of an `f64`.
pub fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite probability")
}

pub fn to_f64(x: &BigRational) -> f64 {
    num_traits::ToPrimitive::to_f64(x).unwrap_or(f64::NAN)
}

/// Replays a fixed prefix of decisions and takes the first live option afterwards,
/// remembering the alternatives it skipped.
struct Explorer {
    prefix: Vec<usize>,
    taken: Vec<usize>,
    /// For every decision past the prefix: the other live options.
    alternatives: Vec<(usize, Vec<usize>)>,
    weight: BigRational,
}

impl Explorer {
    fn decide(&mut self, weights: Vec<BigRational>) -> usize {
        let depth = self.taken.len();
        let live: Vec<usize> = (0..weights.len()).filter(|&i| !weights[i].is_zero()).collect();
        let choice = if depth < self.prefix.len() {
            self.prefix[depth]
        } else {
            let first = *live.first().expect("some option has positive probability");
            self.alternatives.push((depth, live[1..].to_vec()));
            first
        };
        self.weight *= &weights[choice];
        self.taken.push(choice);
        choice
    }
}

impl Chance for Explorer {
    fn bernoulli(&mut self, p: f64) -> bool {
        let p = rational(p.clamp(0.0, 1.0));
        let q = BigRational::one() - &p;
        self.decide(vec![p, q]) == 0
    }

    fn categorical(&mut self, probs: &ProbVector) -> TokenId {
        let w = probs.values().iter().map(|&p| rational(p)).collect();
        TokenId(self.decide(w) as u32)
    }
}

impl Randomness for Explorer {
    fn stream(&mut self, _role: Role) -> &mut dyn Chance {
        self
    }
}

/// Every outcome of `f` with its exact probability. Fails with `TooLarge` after
/// `max_runs` executions.
pub fn enumerate<T>(
    mut f: impl FnMut(&mut dyn Randomness) -> Result<T>,
    max_runs: usize,
) -> Result<Vec<(BigRational, T)>> {
    let mut out = Vec::new();
    let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        if out.len() >= max_runs {
            return Err(Error::TooLarge(format!("more than {max_runs} random paths")));
        }
        let mut ex = Explorer { prefix, taken: Vec::new(), alternatives: Vec::new(), weight: BigRational::one() };
        let value = f(&mut ex)?;
        for (depth, alts) in ex.alternatives.iter().rev() {
            for &alt in alts.iter().rev() {
                let mut p = ex.taken[..*depth].to_vec();
                p.push(alt);
                stack.push(p);
            }
        }
        out.push((ex.weight, value));
    }
    Ok(out)
}

/// Exact marginal of the first token emitted by one engine step after `prompt`,
/// together with the total probability of all enumerated paths.
pub fn enumerate_step_distribution(
    engine: &Engine<'_>,
    prompt: &[TokenId],
    max_runs: usize,
) -> Result<(Vec<BigRational>, BigRational)> {
    let session = engine.start(prompt)?;
    let vocab = engine.oracle().vocab_size();
    let outcomes = enumerate(
        |rng| {
            let mut s = session.clone();
            let step = engine.step(&mut s, usize::MAX / 2, rng)?;
            Ok(step.emitted[0].token)
        },
        max_runs,
    )?;
    let mut marginal = vec![BigRational::zero(); vocab];
    let mut total = BigRational::zero();
    for (w, t) in outcomes {
        total += &w;
        marginal[t.index()] += w;
    }
    Ok((marginal, total))
}

/// Total variation distance between an exact and a floating-point distribution.
pub fn total_variation_exact(exact: &[BigRational], target: &ProbVector) -> f64 {
    let half = BigRational::new(BigInt::from(1), BigInt::from(2));
    let sum = exact
        .iter()
        .zip(target.values())
        .map(|(e, &t)| {
            let d = e - rational(t);
            if d < BigRational::zero() {
                -d
            } else {
                d
            }
        })
        .fold(BigRational::zero(), |a, b| a + b);
    to_f64(&(sum * half))
}

/// Emission marginal of sequential residual acceptance with `k` candidates drawn
/// i.i.d. from `q`, computed in exact rational arithmetic by summing over the value
/// of each candidate in turn. Shares no code with the engine's acceptance path.
pub fn residual_marginal_exact(p: &[BigRational], q: &[BigRational], k: usize) -> Vec<BigRational> {
    fn go(p: &[BigRational], q: &[BigRational], k: usize, out: &mut [BigRational], w: &BigRational) {
        if k == 0 {
            for (o, pi) in out.iter_mut().zip(p) {
                *o += w * pi;
            }
            return;
        }
        // residual after a rejection does not depend on which candidate was rejected
        let residual = {
            let r: Vec<BigRational> = p
                .iter()
                .zip(q)
                .map(|(a, b)| if a > b { a - b } else { BigRational::zero() })
                .collect();
            let s = r.iter().fold(BigRational::zero(), |a, b| a + b);
            if s.is_zero() {
                None
            } else {
                Some(r.into_iter().map(|x| x / &s).collect::<Vec<_>>())
            }
        };
        let mut reject_mass = BigRational::zero();
        for x in 0..q.len() {
            if q[x].is_zero() {
                continue;
            }
            let ratio = if p[x] >= q[x] { BigRational::one() } else { &p[x] / &q[x] };
            out[x] += w * &q[x] * &ratio;
            reject_mass += &q[x] * (BigRational::one() - ratio);
        }
        if !reject_mass.is_zero() {
            let r = residual.expect("rejection implies residual mass");
            go(&r, q, k - 1, out, &(w * reject_mass));
        }
    }
    let mut out = vec![BigRational::zero(); p.len()];
    go(p, q, k, &mut out, &BigRational::one());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accept::{residual_accept_node, Candidate};
    use crate::tree::StageTag;

    fn r(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn single_candidate_example() {
        let p = ProbVector::new(vec![0.6, 0.4]).unwrap();
        let q = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let outcomes = enumerate(
            |rng| {
                let c = rng.stream(Role::TreeBuild).categorical(&q);
                let o = residual_accept_node(&p, &q, &[Candidate { token: c, proposer: StageTag::Draft }], rng)?;
                Ok(o.emitted)
            },
            100,
        )
        .unwrap();
        let mut m = [BigRational::zero(), BigRational::zero()];
        for (w, t) in outcomes {
            m[t.index()] += w;
        }
        assert!((to_f64(&m[0]) - 0.6).abs() < 1e-15);
        assert!((to_f64(&m[1]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn exact_residual_marginal_is_target() {
        let p = vec![r(1, 2), r(1, 3), r(1, 6), r(0, 1)];
        let q = vec![r(1, 4), r(1, 4), r(1, 4), r(1, 4)];
        for k in 0..4 {
            assert_eq!(residual_marginal_exact(&p, &q, k), p);
        }
    }

    #[test]
    fn run_budget_enforced() {
        let res = enumerate(
            |rng| {
                for _ in 0..20 {
                    rng.stream(Role::Acceptance).bernoulli(0.5);
                }
                Ok(())
            },
            1000,
        );
        assert!(matches!(res, Err(Error::TooLarge(_))));
    }
}
