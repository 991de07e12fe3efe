//! Benchmark-only crate; see `benches/kernels.rs`. The library target is
//! empty so `cargo test --workspace` has nothing extra to build here.
