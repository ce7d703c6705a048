//! Criterion benchmarks for the decoding hot paths live under `benches/`:
//! tree-batch forward passes, whole engine steps and trigram lookups.
