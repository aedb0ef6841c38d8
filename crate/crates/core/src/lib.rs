//! CPU inference runtime for small decoder-only language models.
//!
//! The crate is organized by subsystem:
//!
//! - [`tensor`]: element types, the tensor container, deterministic random tensors.
//! - [`quantize`]: asymmetric block quantization, int8 activations, int8/fp8 KV codecs.
//! - [`kernels`]: tile-packed W4A8/W8A8 GEMM, tile-size solver, attention.
//! - [`geometry`]: Region address maps for data rearrangement and their fusion.
//! - [`scheduler`]: rate-proportional partitioning over a fixed worker pool.
//! - [`store`]: simulated DRAM/flash tiering with a timing ledger and KV prefetch.
//! - [`runtime`]: model files, the decode engine, LoRA adapters.

pub mod error;
pub mod geometry;
pub mod kernels;
pub mod quantize;
pub mod runtime;
pub mod scheduler;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
