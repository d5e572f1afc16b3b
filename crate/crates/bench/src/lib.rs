//! Criterion benchmarks for the MDMIL engine live under `benches/`.
