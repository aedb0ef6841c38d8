//! Packed-layout quantized GEMM, tile-size selection and the attention path.

pub mod attention;
pub mod gemm;
pub mod pack;
pub mod tiles;

pub use attention::{attention, attention_with_pool, softmax_rows, KvLayout, KvView};
pub use gemm::{access_counting_enabled, gemm_q, gemm_q_counted, gemm_q_into, ACCESS_COUNT_ENV};
pub use pack::{pack_activations, pack_weights, quantize_and_pack, PackedActivations, PackedWeights};
pub use tiles::{count_accesses, solve_tile_sizes, AccessCount, TileConfig, PRESETS};
