//! Benchmark-only crate; see `benches/faa_ops.rs`.
