//! Decoder-only model assembly and generation.

pub mod config;
pub mod engine;
pub mod lora;
pub mod reference;
pub mod tokenizer;
pub mod weights;

pub use config::{ModelConfig, ParamCounts};
pub use engine::{load_model, Engine, EngineOptions, EngineStats};
pub use lora::{lora_cost, LoraAdapter, LoraCost};
pub use tokenizer::{detokenize, tokenize, BOS, EOS};
pub use weights::{gen_model, read_model_dir, ModelWeights, Proj};
