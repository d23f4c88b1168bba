//! Benchmarks for the kdsrl kernels live under `benches/`.
