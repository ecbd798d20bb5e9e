//! Criterion benchmarks for volnet kernels and the training step live in `benches/`.
