//! Properties of warping, sampling and the residual acceptance rule.

use proptest::prelude::*;

use specdec::accept::residual_after_reject;
use specdec::sampling::{sample_with_uniform, warp_logits};
use specdec::{LogitVector, ProbVector, SamplingPolicy, TokenId};

fn arb_dist(len: usize) -> impl Strategy<Value = ProbVector> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1.0], len)
        .prop_filter("needs mass", |w| w.iter().sum::<f64>() > 0.0)
        .prop_map(|w| ProbVector::normalized(w).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn greedy_picks_the_lowest_index_maximum(raw in prop::collection::vec(-3i32..3, 1..20), u in 0.0f64..1.0) {
        // small integer logits force frequent ties
        let logits = LogitVector::new(raw.iter().map(|&x| x as f64).collect()).unwrap();
        let max = *raw.iter().max().unwrap();
        let first = raw.iter().position(|&x| x == max).unwrap();
        let warped = warp_logits(&logits, &SamplingPolicy::Greedy);
        prop_assert_eq!(sample_with_uniform(&warped, u), TokenId(first as u32));
    }

    #[test]
    fn residual_is_supported_where_p_exceeds_q((p, q) in (2usize..10).prop_flat_map(|n| (arb_dist(n), arb_dist(n)))) {
        prop_assume!(p.total_variation(&q) > 1e-9);
        let r = residual_after_reject(&p, &q).unwrap();
        prop_assert!((r.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for ((&ri, &pi), &qi) in r.values().iter().zip(p.values()).zip(q.values()) {
            if pi <= qi {
                prop_assert_eq!(ri, 0.0);
            } else {
                prop_assert!(ri > 0.0);
            }
        }
    }

    /// Draft token `x ~ q` accepted with probability `min(1, p/q)`, otherwise a
    /// draw from the residual: the emitted marginal is `p`.
    #[test]
    fn single_candidate_rule_preserves_the_target((p, q) in (2usize..10).prop_flat_map(|n| (arb_dist(n), arb_dist(n)))) {
        prop_assume!(p.total_variation(&q) > 1e-9);
        let overlap: f64 = p.values().iter().zip(q.values()).map(|(a, b)| a.min(*b)).sum();
        let r = residual_after_reject(&p, &q).unwrap();
        for i in 0..p.len() {
            let (pi, qi) = (p.values()[i], q.values()[i]);
            let accepted = if qi > 0.0 { qi * (pi / qi).min(1.0) } else { 0.0 };
            let marginal = accepted + (1.0 - overlap) * r.values()[i];
            prop_assert!((marginal - pi).abs() < 1e-12, "token {}: {} vs {}", i, marginal, pi);
        }
    }

    #[test]
    fn topk_keeps_the_k_most_likely(raw in prop::collection::vec(-5.0f64..5.0, 2..30), k in 1usize..10, t in 0.3f64..2.0) {
        let logits = LogitVector::new(raw.clone()).unwrap();
        let warped = warp_logits(&logits, &SamplingPolicy::topk(k, t));
        let kept: Vec<usize> = (0..raw.len()).filter(|&i| warped.values()[i] > 0.0).collect();
        prop_assert_eq!(kept.len(), k.min(raw.len()));
        let lowest_kept = kept.iter().map(|&i| raw[i]).fold(f64::INFINITY, f64::min);
        for i in (0..raw.len()).filter(|i| !kept.contains(i)) {
            prop_assert!(raw[i] <= lowest_kept);
        }
    }
}
