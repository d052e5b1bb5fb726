//! Bench-only crate; see `benches/pfpe.rs`.
