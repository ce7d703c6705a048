//! Bandwidth accounting, throughput statistics and token-origin markup.
//!
//! Decoding is assumed memory bound: every forward pass streams the model's full
//! parameter set once, so the bytes a run moves are `forwards x param_bytes`
//! summed over stages. Cache traffic is not counted.

mod origin;

use serde::{Deserialize, Serialize};

use crate::engine::{Generation, StageCounts, StepResult};
use crate::error::{Error, Result};
use crate::model::ModelCost;
use crate::tree::StageTag;

pub use origin::{render_origin, OriginFormat, OriginMarkup};

/// Parameter cost of each stage. A missing stage costs nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCosts {
    pub oracle: ModelCost,
    pub draft: ModelCost,
    pub draft2: ModelCost,
}

impl StageCosts {
    pub fn get(&self, stage: StageTag) -> ModelCost {
        match stage {
            StageTag::Oracle => self.oracle,
            StageTag::Draft => self.draft,
            StageTag::Draft2 => self.draft2,
        }
    }
}

/// Bytes streamed per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBytes {
    pub oracle: u64,
    pub draft: u64,
    pub draft2: u64,
}

impl StageBytes {
    pub fn total(&self) -> u64 {
        self.oracle + self.draft + self.draft2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub forwards: StageCounts,
    pub bytes: StageBytes,
    pub emitted: usize,
    pub oracle_param_bytes: u64,
    /// Total bytes over the bytes a one-token-per-pass decoder would stream for the
    /// same output.
    pub relative_bandwidth: f64,
}

impl BandwidthReport {
    fn from_totals(forwards: StageCounts, emitted: usize, costs: &StageCosts) -> Result<Self> {
        let oracle_bytes = costs.oracle.param_bytes;
        if oracle_bytes == 0 {
            return Err(Error::InvalidArgument("oracle param_bytes must be positive".into()));
        }
        if emitted == 0 {
            return Err(Error::InvalidArgument("no tokens emitted".into()));
        }
        let bytes = StageBytes {
            oracle: forwards.oracle as u64 * oracle_bytes,
            draft: forwards.draft as u64 * costs.draft.param_bytes,
            draft2: forwards.draft2 as u64 * costs.draft2.param_bytes,
        };
        let reference = emitted as u128 * oracle_bytes as u128;
        Ok(BandwidthReport {
            forwards,
            bytes,
            emitted,
            oracle_param_bytes: oracle_bytes,
            relative_bandwidth: bytes.total() as f64 / reference as f64,
        })
    }

    /// Pool several reports that share the same oracle cost.
    pub fn combine(reports: &[BandwidthReport], costs: &StageCosts) -> Result<Self> {
        let mut forwards = StageCounts::default();
        let mut emitted = 0;
        for r in reports {
            forwards.add(&r.forwards);
            emitted += r.emitted;
        }
        Self::from_totals(forwards, emitted, costs)
    }
}

/// Bandwidth of a run given its steps and the cost of each stage.
pub fn account(steps: &[StepResult], costs: &StageCosts) -> Result<BandwidthReport> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("bandwidth accounting needs at least one step".into()));
    }
    let mut forwards = StageCounts::default();
    let mut emitted = 0;
    for s in steps {
        forwards.add(&s.forwards);
        emitted += s.emitted.len();
    }
    BandwidthReport::from_totals(forwards, emitted, costs)
}

/// Emitted tokens per originating stage.
pub fn origin_histogram(steps: &[StepResult]) -> StageCounts {
    let mut h = StageCounts::default();
    for e in steps.iter().flat_map(|s| &s.emitted) {
        match e.origin {
            StageTag::Oracle => h.oracle += 1,
            StageTag::Draft => h.draft += 1,
            StageTag::Draft2 => h.draft2 += 1,
        }
    }
    h
}

/// Speculative tokens the oracle saw and accepted, by proposing stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageAcceptance {
    pub proposed: StageCounts,
    pub accepted: StageCounts,
}

impl StageAcceptance {
    pub fn from_steps(steps: &[StepResult]) -> Self {
        let mut out = StageAcceptance::default();
        for s in steps {
            if let Some(tree) = &s.tree {
                for node in &tree.nodes()[1..] {
                    bump(&mut out.proposed, node.proposer);
                }
            }
            for e in s.emitted.iter().take(s.accepted_len) {
                bump(&mut out.accepted, e.origin);
            }
        }
        out
    }

    pub fn add(&mut self, other: &StageAcceptance) {
        self.proposed.add(&other.proposed);
        self.accepted.add(&other.accepted);
    }

    /// Accepted over proposed for one stage, if it proposed anything.
    pub fn rate(&self, stage: StageTag) -> Option<f64> {
        let p = self.proposed.get(stage);
        (p > 0).then(|| self.accepted.get(stage) as f64 / p as f64)
    }
}

fn bump(c: &mut StageCounts, stage: StageTag) {
    match stage {
        StageTag::Oracle => c.oracle += 1,
        StageTag::Draft => c.draft += 1,
        StageTag::Draft2 => c.draft2 += 1,
    }
}

/// Statistics of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub emitted: usize,
    pub oracle_calls: usize,
    pub tokens_per_call: f64,
    pub origins: StageCounts,
    pub acceptance: StageAcceptance,
    pub bandwidth: BandwidthReport,
    /// Wall-clock decode time, when measured.
    pub wall_seconds: Option<f64>,
}

impl RunStats {
    pub fn from_steps(steps: &[StepResult], costs: &StageCosts, wall_seconds: Option<f64>) -> Result<Self> {
        let bandwidth = account(steps, costs)?;
        let emitted = bandwidth.emitted;
        let oracle_calls = bandwidth.forwards.oracle;
        Ok(RunStats {
            emitted,
            oracle_calls,
            tokens_per_call: emitted as f64 / oracle_calls as f64,
            origins: origin_histogram(steps),
            acceptance: StageAcceptance::from_steps(steps),
            bandwidth,
            wall_seconds,
        })
    }

    pub fn from_generation(generation: &Generation, costs: &StageCosts, wall_seconds: Option<f64>) -> Result<Self> {
        Self::from_steps(&generation.steps, costs, wall_seconds)
    }
}

/// Aggregate statistics over runs of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub runs: usize,
    pub emitted: usize,
    pub oracle_calls: usize,
    /// Mean over runs of each run's tokens per oracle call.
    pub tokens_per_call_mean: f64,
    pub tokens_per_call_median: f64,
    pub tokens_per_call: Vec<f64>,
    /// Emitted tokens over total wall-clock seconds, when every run was timed.
    pub tokens_per_second: Option<f64>,
    pub acceptance: StageAcceptance,
    pub origins: StageCounts,
}

pub fn summarize(runs: &[RunStats]) -> Result<ThroughputReport> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("summary needs at least one run".into()));
    }
    let per_run: Vec<f64> = runs.iter().map(|r| r.tokens_per_call).collect();
    let mut acceptance = StageAcceptance::default();
    let mut origins = StageCounts::default();
    for r in runs {
        acceptance.add(&r.acceptance);
        origins.add(&r.origins);
    }
    let seconds: Option<f64> = runs.iter().map(|r| r.wall_seconds).sum();
    let emitted = runs.iter().map(|r| r.emitted).sum();
    Ok(ThroughputReport {
        runs: runs.len(),
        emitted,
        oracle_calls: runs.iter().map(|r| r.oracle_calls).sum(),
        tokens_per_call_mean: per_run.iter().sum::<f64>() / per_run.len() as f64,
        tokens_per_call_median: median(&per_run),
        tokens_per_call: per_run,
        tokens_per_second: seconds.filter(|&s| s > 0.0).map(|s| emitted as f64 / s),
        acceptance,
        origins,
    })
}

/// Speedup of a method over the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub tokens_per_call: f64,
    pub wall_clock: Option<f64>,
}

pub fn speedup(method: &ThroughputReport, baseline: &ThroughputReport) -> Speedup {
    Speedup {
        tokens_per_call: method.tokens_per_call_mean / baseline.tokens_per_call_mean,
        wall_clock: method.tokens_per_second.zip(baseline.tokens_per_second).map(|(a, b)| a / b),
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accept::Emission;
    use crate::vocab::TokenId;

    fn step(emitted: &[StageTag], forwards: StageCounts) -> StepResult {
        StepResult {
            emitted: emitted.iter().map(|&origin| Emission { token: TokenId(0), origin }).collect(),
            tree_size: emitted.len(),
            tree_depth: emitted.len() - 1,
            accepted_len: emitted.len() - 1,
            rejected: false,
            forwards,
            nodes_evaluated: StageCounts::default(),
            draft_evaluated: Vec::new(),
            tree: None,
        }
    }

    fn costs(oracle: u64, draft: u64) -> StageCosts {
        StageCosts {
            oracle: ModelCost { param_bytes: oracle },
            draft: ModelCost { param_bytes: draft },
            draft2: ModelCost::FREE,
        }
    }

    #[test]
    fn worked_bandwidth_example() {
        use StageTag::*;
        let s = step(&[Draft, Draft, Draft, Oracle], StageCounts { oracle: 1, draft: 3, draft2: 5 });
        let r = account(&[s], &costs(100_000_000, 5_000_000)).unwrap();
        assert_eq!(r.bytes.total(), 115_000_000);
        assert!((r.relative_bandwidth - 115.0 / 400.0).abs() < 1e-15);
    }

    #[test]
    fn baseline_is_exactly_one() {
        let steps: Vec<_> = (0..1000)
            .map(|_| step(&[StageTag::Oracle], StageCounts { oracle: 1, draft: 0, draft2: 0 }))
            .collect();
        let r = account(&steps, &costs(123_456_789, 7)).unwrap();
        assert_eq!(r.relative_bandwidth, 1.0);
    }

    #[test]
    fn empty_and_free_oracle_rejected() {
        assert!(account(&[], &costs(1, 1)).is_err());
        let s = step(&[StageTag::Oracle], StageCounts { oracle: 1, draft: 0, draft2: 0 });
        assert!(account(&[s], &costs(0, 1)).is_err());
    }

    #[test]
    fn tokens_per_call_mean() {
        use StageTag::*;
        let one = StageCounts { oracle: 1, draft: 0, draft2: 0 };
        let steps = vec![step(&[Draft, Draft2, Oracle], one), step(&[Oracle], one), step(&[Draft, Oracle], one)];
        let run = RunStats::from_steps(&steps, &costs(10, 1), None).unwrap();
        let rep = summarize(&[run]).unwrap();
        assert_eq!(rep.tokens_per_call_mean, 2.0);
        assert_eq!(rep.origins, StageCounts { oracle: 3, draft: 2, draft2: 1 });
        assert_eq!(rep.tokens_per_second, None);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
