//! Criterion benchmarks for the tensor kernels and full training steps.
//!
//! Run with `cargo bench -p rndiv-bench`; the benchmarks live under `benches/`.
