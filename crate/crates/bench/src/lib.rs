//! Criterion benchmarks for the training and retrieval kernels live in `benches/`.
