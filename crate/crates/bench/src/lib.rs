//! Criterion benchmarks for afg-core live under `benches/`.
