//! Criterion benchmarks for the tensor kernels and one optimizer step of
//! each learning rule. Run with `cargo bench -p layerwise-bench`.
