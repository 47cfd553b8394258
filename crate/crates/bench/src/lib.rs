//! Benchmark-only crate; see `benches/estimator.rs`.
