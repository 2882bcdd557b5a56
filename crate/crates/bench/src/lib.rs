//! Criterion benchmarks for the hot paths of `neurocontrol`; see `benches/`.
