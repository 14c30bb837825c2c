//! Criterion benchmarks for the detection pipeline live under `benches/`.
