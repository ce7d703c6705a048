//! Staged speculative decoding.
//!
//! An oracle model verifies tree-structured batches of candidate tokens proposed by a
//! draft model, while the draft model's own decoding is sped up by a Katz backoff
//! trigram. Acceptance rules keep the oracle's (warped) output distribution exact.

pub mod accept;
pub mod benchmark;
pub mod engine;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod ngram;
pub mod rng;
pub mod sampling;
pub mod transformer;
pub mod tree;
pub mod verify;
pub mod vocab;

pub use accept::{AcceptOutcome, Candidate, Emission, WalkResult};
pub use engine::{Engine, EngineConfig, Generation, Method, Session, StageCounts, StepResult};
pub use error::{Error, Result};
pub use ngram::{KatzTrigram, NgramCounts};
pub use model::{KvCache, LanguageModel, ModelCost, ModelState};
pub use rng::{Chance, RandomStream, Randomness, Role, SeededRandomness};
pub use sampling::{LogitVector, ProbVector, SamplingPolicy};
pub use transformer::{Transformer, TransformerConfig};
pub use tree::{SpecNode, SpecTree, StageTag, TreeBatch};
pub use vocab::{TokenId, Vocab};
