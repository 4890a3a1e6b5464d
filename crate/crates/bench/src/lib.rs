//! Criterion benchmarks for the attention engine; see `benches/`.
