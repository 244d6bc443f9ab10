//! Criterion benchmarks for `nsl-core`; run with `cargo bench -p nsl-bench`.
