//! Criterion benchmarks of the hot kernels: quantization, nucleus
//! selection, Frechet distance and k-means. Run with `cargo bench -p vqtok-bench`.
