//! Criterion benchmarks for handprobe kernels; see `benches/`.
