//! Criterion benchmarks for the episode pipeline live under `benches/`.
