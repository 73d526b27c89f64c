//! Criterion benchmarks for the numeric kernels, attention, one training
//! step and SSIM. Run with `cargo bench -p codemae-bench`.
