//! Models and oracles for exact verification: explicit probability tables, drafts
//! with controlled alignment, and exhaustive enumeration of random decisions.

mod agreement;
mod enumerate;
mod instances;
mod mixture;
mod table;
mod trees;

pub use agreement::{agreement_rate, token_agreement};
pub use enumerate::{
    enumerate, enumerate_step_distribution, rational, residual_marginal_exact, to_f64, total_variation_exact,
};
pub use instances::{ExactnessCheck, ExactnessInstance, INSTANCE_VOCAB};
pub use mixture::{make_aligned_pair, AlignedPair, MixtureModel};
pub use table::{TableModel, ROW_TOLERANCE};
pub use trees::{mask_violations, random_tree, tree_sequential_max_diff};
