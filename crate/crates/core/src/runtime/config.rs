use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

fn default_max_context() -> usize {
    2048
}

/// Shape of a pre-norm decoder with grouped-query attention and a gated MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// Longest sequence (prompt plus generated tokens) the KV cache accepts.
    #[serde(default = "default_max_context")]
    pub max_context: usize,
}

/// Parameter totals split the way memory placement treats them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub embedding: u64,
    /// all decoder layers
    pub layers: u64,
    pub per_layer: u64,
    /// LM head projection plus the final norm
    pub lm_head: u64,
    pub total: u64,
}

impl ParamCounts {
    pub fn embedding_share(&self) -> f64 {
        self.embedding as f64 / self.total as f64
    }
}

impl ModelConfig {
    fn with_shape(vocab: usize, hidden: usize, inter: usize, layers: usize, heads: usize, kv: usize) -> Self {
        Self {
            vocab_size: vocab,
            hidden_size: hidden,
            intermediate_size: inter,
            n_layers: layers,
            n_heads: heads,
            n_kv_heads: kv,
            head_dim: hidden / heads,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
            max_context: default_max_context(),
        }
    }

    pub fn tiny() -> Self {
        Self::with_shape(256, 64, 128, 2, 4, 2)
    }

    /// Qwen2-7B shapes (28 query heads sharing 4 KV heads of width 128).
    pub fn qwen2_7b() -> Self {
        Self::with_shape(151_646, 3584, 18_944, 28, 28, 4)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "qwen2-7b" => Ok(Self::qwen2_7b()),
            _ => Err(Error::BadArg(format!("unknown preset '{name}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.hidden_size,
            self.intermediate_size,
            self.n_layers,
            self.n_heads,
            self.n_kv_heads,
            self.head_dim,
            self.max_context,
        ];
        if dims.contains(&0) {
            return Err(Error::BadShape(format!("config sizes must be positive: {self:?}")));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::BadShape(format!(
                "{} heads not divisible by {} kv heads",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.n_heads * self.head_dim != self.hidden_size {
            return Err(Error::BadShape(format!(
                "hidden {} != heads {} x head_dim {}",
                self.hidden_size, self.n_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::BadShape("rotary embedding needs an even head_dim".into()));
        }
        if !(self.rope_theta > 0.0 && self.norm_eps >= 0.0) {
            return Err(Error::BadShape("rope_theta must be positive and norm_eps non-negative".into()));
        }
        Ok(())
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Linear weight shapes `[out, in]` of one layer in file order.
    pub fn layer_linear_shapes(&self) -> [(usize, usize); 7] {
        let (h, i, kv) = (self.hidden_size, self.intermediate_size, self.kv_dim());
        [(h, h), (kv, h), (kv, h), (h, h), (i, h), (i, h), (h, i)]
    }

    pub fn param_counts(&self) -> ParamCounts {
        let h = self.hidden_size as u64;
        let embedding = self.vocab_size as u64 * h;
        let linear: u64 = self.layer_linear_shapes().iter().map(|&(o, i)| (o * i) as u64).sum();
        let per_layer = linear + 2 * h;
        let layers = per_layer * self.n_layers as u64;
        let lm_head = embedding + h;
        ParamCounts { embedding, layers, per_layer, lm_head, total: embedding + layers + lm_head }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::BadModel(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::BadModel(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_preset() {
        let c = ModelConfig::tiny();
        c.validate().unwrap();
        assert_eq!(
            (c.vocab_size, c.hidden_size, c.intermediate_size, c.n_layers, c.n_heads, c.n_kv_heads, c.head_dim),
            (256, 64, 128, 2, 4, 2, 16)
        );
    }

    #[test]
    fn tiny_param_count_closed_form() {
        let p = ModelConfig::tiny().param_counts();
        let per_layer = 64 * 64 * 2 + 2 * 32 * 64 + 3 * 128 * 64 + 2 * 64;
        assert_eq!(p.per_layer, per_layer);
        assert_eq!(p.embedding, 256 * 64);
        assert_eq!(p.lm_head, 256 * 64 + 64);
        assert_eq!(p.total, p.embedding + p.layers + p.lm_head);
        assert_eq!(p.total, 16384 + 2 * per_layer + 16448);
    }

    #[test]
    fn qwen_shapes() {
        let c = ModelConfig::qwen2_7b();
        c.validate().unwrap();
        assert_eq!(c.head_dim, 128);
        let p = c.param_counts();
        assert_eq!(p.embedding, 151_646 * 3584);
        assert_eq!(p.per_layer, 233_053_184);
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let c = ModelConfig::tiny();
        assert_eq!(ModelConfig::from_json(&c.to_json()).unwrap(), c);
        let minimal = r#"{"vocab_size":16,"hidden_size":8,"intermediate_size":8,"n_layers":1,
            "n_heads":2,"n_kv_heads":1,"head_dim":4}"#;
        let m = ModelConfig::from_json(minimal).unwrap();
        assert_eq!(m.max_context, 2048);
        assert_eq!(ModelConfig::from_json("{").unwrap_err().code(), "bad-model");
        let bad = minimal.replace("\"head_dim\":4", "\"head_dim\":3");
        assert_eq!(ModelConfig::from_json(&bad).unwrap_err().code(), "bad-shape");
    }
}
