//! Criterion benchmarks for the sceneloc workspace; see `benches/`.
