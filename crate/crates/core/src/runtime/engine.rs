//! Decoder engine: packed quantized weights, a KV cache in the tiered store,
//! prefill/decode and greedy generation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use half::bf16;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{apply_regions_typed, region_for_transpose};
use crate::kernels::{
    access_counting_enabled, attention_with_pool, gemm_q_into, pack_weights, quantize_and_pack, KvLayout, KvView,
    PackedWeights, TileConfig,
};
use crate::quantize::{quantize_matrix, QuantBits, DEFAULT_BLOCK_SIZE};
use crate::runtime::config::{ModelConfig, ParamCounts};
use crate::runtime::lora::{apply_bypass, LoraAdapter, LoraPair};
use crate::runtime::tokenizer::EOS;
use crate::runtime::weights::{read_model_dir, ModelWeights, Proj};
use crate::scheduler::Pool;
use crate::store::{default_compute_window, open_store, EmbeddingHandle, PrefetchTicket, StorageConfig, Store, TimingReport};

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub tiles: TileConfig,
    pub layer_bits: QuantBits,
    pub lm_head_bits: QuantBits,
    pub key_bits: QuantBits,
    pub block_size: usize,
    pub threads: usize,
    /// Relative worker speeds; measured at startup when absent.
    pub rates: Option<Vec<f64>>,
    pub storage: StorageConfig,
    /// Keep the embedding table in flash and read one row per token.
    pub embed_flash: bool,
    pub lora_paths: Vec<PathBuf>,
}

impl EngineOptions {
    pub fn new(flash_dir: impl Into<PathBuf>) -> Self {
        Self {
            tiles: TileConfig { e_p: 12, h_p: 8, l_p: 4 },
            layer_bits: QuantBits::Int4,
            lm_head_bits: QuantBits::Int8,
            key_bits: QuantBits::Int8,
            block_size: DEFAULT_BLOCK_SIZE,
            threads: 1,
            rates: None,
            storage: StorageConfig::new(flash_dir),
            embed_flash: true,
            lora_paths: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EngineStats {
    /// Tiled GEMM loads and stores, when access counting is on.
    pub gemm_accesses: u64,
    pub lora_accesses: u64,
    pub prefill_tokens: u64,
    pub prefill_seconds: f64,
    pub decode_tokens: u64,
    pub decode_seconds: f64,
}

struct Layer {
    attn_norm: Vec<f32>,
    ffn_norm: Vec<f32>,
    proj: Vec<PackedWeights>,
}

enum Embedding {
    Dram(Vec<bf16>),
    Flash(EmbeddingHandle),
}

pub struct Engine {
    cfg: ModelConfig,
    tiles: TileConfig,
    pool: Pool,
    layers: Vec<Layer>,
    final_norm: Vec<f32>,
    lm_head: PackedWeights,
    embedding: Embedding,
    store: Store,
    kv_layout: KvLayout,
    pos: usize,
    adapters: BTreeMap<String, LoraAdapter>,
    active: Option<String>,
    logit_bias: Option<Vec<f32>>,
    stats: EngineStats,
    count_accesses: bool,
    layer_bytes: u64,
    head_bytes: u64,
    /// In-flight history read: (layer, ticket, bytes covered).
    pending: Option<(usize, PrefetchTicket, usize)>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("cfg", &self.cfg)
            .field("tiles", &self.tiles)
            .field("pos", &self.pos)
            .field("active_lora", &self.active)
            .finish()
    }
}

fn pack(values: &[f32], rows: usize, cols: usize, bits: QuantBits, opts: &EngineOptions) -> Result<PackedWeights> {
    let q = quantize_matrix(values, rows, cols, bits, opts.block_size)?;
    pack_weights(&q, opts.tiles)
}

/// Row-wise RMSNorm: `x / sqrt(mean(x^2) + eps) * scale`.
pub fn rms_norm_rows(x: &[f32], scale: &[f32], eps: f64) -> Vec<f32> {
    let h = scale.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(h) {
        let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / h as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        out.extend(row.iter().zip(scale).map(|(&v, &g)| (v as f64 * inv) as f32 * g));
    }
    out
}

/// Rotate-half rotary embedding of `[tokens, heads, d]` at positions `pos0..`.
pub fn apply_rope(x: &mut [f32], heads: usize, d: usize, pos0: usize, theta: f64) {
    let half = d / 2;
    for (t, token) in x.chunks_exact_mut(heads * d).enumerate() {
        let p = (pos0 + t) as f64;
        for head in token.chunks_exact_mut(d) {
            for i in 0..half {
                let angle = p * theta.powf(-2.0 * i as f64 / d as f64);
                let (s, c) = (angle.sin() as f32, angle.cos() as f32);
                let (a, b) = (head[i], head[i + half]);
                head[i] = a * c - b * s;
                head[i + half] = a * s + b * c;
            }
        }
    }
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

impl Engine {
    pub fn new(cfg: ModelConfig, weights: &ModelWeights, opts: EngineOptions) -> Result<Self> {
        cfg.validate()?;
        let (h, v) = (cfg.hidden_size, cfg.vocab_size);
        let lin = cfg.layer_linear_shapes();
        if weights.layers.len() != cfg.n_layers || weights.embedding.len() != v * h || weights.lm_head.len() != v * h {
            return Err(Error::BadShape("weights do not match the config".into()));
        }
        let pool = Pool::new(opts.threads, opts.rates.as_deref())?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lw in &weights.layers {
            let mut proj = Vec::with_capacity(7);
            for (values, &(o, i)) in lw.proj.iter().zip(&lin) {
                proj.push(pack(values, o, i, opts.layer_bits, &opts)?);
            }
            layers.push(Layer { attn_norm: lw.attn_norm.clone(), ffn_norm: lw.ffn_norm.clone(), proj });
        }
        let lm_head = pack(&weights.lm_head, v, h, opts.lm_head_bits, &opts)?;
        let layer_bytes = layers
            .first()
            .map(|l| l.proj.iter().map(|p| p.storage_bytes() as u64).sum::<u64>() + 8 * h as u64)
            .unwrap_or(0);
        let head_bytes = lm_head.storage_bytes() as u64 + 4 * h as u64;

        let mut store = open_store(opts.storage.clone())?;
        store.add_dram_resident(layer_bytes * cfg.n_layers as u64 + head_bytes);
        let table: Vec<bf16> = weights.embedding.iter().map(|&x| bf16::from_f32(x)).collect();
        let embedding = if opts.embed_flash {
            let bytes: Vec<u8> = table.iter().flat_map(|b| b.to_le_bytes()).collect();
            Embedding::Flash(store.put_embedding_table(v, 2 * h, &bytes)?)
        } else {
            store.add_dram_resident(2 * table.len() as u64);
            Embedding::Dram(table)
        };
        if store.config().compute_window.is_none() {
            let w = default_compute_window(layer_bytes, store.config().dram_bandwidth);
            store.set_compute_window(w);
        }
        let kv_layout = KvLayout { kv_heads: cfg.n_kv_heads, head_dim: cfg.head_dim, key_bits: opts.key_bits };
        for l in 0..cfg.n_layers {
            store.create_kv_layer(l, kv_layout.record_bytes())?;
        }
        let mut engine = Self {
            cfg,
            tiles: opts.tiles,
            pool,
            layers,
            final_norm: weights.final_norm.clone(),
            lm_head,
            embedding,
            store,
            kv_layout,
            pos: 0,
            adapters: BTreeMap::new(),
            active: None,
            logit_bias: None,
            stats: EngineStats::default(),
            count_accesses: access_counting_enabled(),
            layer_bytes,
            head_bytes,
            pending: None,
        };
        for path in &opts.lora_paths {
            engine.attach_lora(LoraAdapter::load(path)?)?;
        }
        Ok(engine)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tiles(&self) -> TileConfig {
        self.tiles
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn set_access_counting(&mut self, on: bool) {
        self.count_accesses = on;
    }

    pub fn param_counts(&self) -> ParamCounts {
        self.cfg.param_counts()
    }

    pub fn kv_layout(&self) -> KvLayout {
        self.kv_layout
    }

    /// Tokens held in the KV cache of `layer`.
    pub fn kv_len(&self, layer: usize) -> usize {
        self.store.kv_buffer(layer).map(|b| b.len() / self.kv_layout.record_bytes()).unwrap_or(0)
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Packed bytes of one decoder layer (weights plus norm scales).
    pub fn layer_bytes(&self) -> u64 {
        self.layer_bytes
    }

    pub fn timing_report(&self) -> TimingReport {
        self.store.timing_report()
    }

    /// Dequantized `[out, in]` weights of a projection.
    pub fn dequantized(&self, layer: usize, proj: Proj) -> Vec<f32> {
        self.layers[layer].proj[proj.index()].dequantize()
    }

    pub fn norms(&self, layer: usize) -> (&[f32], &[f32]) {
        (&self.layers[layer].attn_norm, &self.layers[layer].ffn_norm)
    }

    /// Add a fixed bias to every logit vector; `None` clears it.
    pub fn set_logit_bias(&mut self, bias: Option<Vec<f32>>) -> Result<()> {
        if let Some(b) = &bias {
            if b.len() != self.cfg.vocab_size {
                return Err(Error::BadShape(format!("bias of {} for vocab {}", b.len(), self.cfg.vocab_size)));
            }
        }
        self.logit_bias = bias;
        Ok(())
    }

    /// Attach an adapter and make it the active one. Base weights are untouched.
    pub fn attach_lora(&mut self, adapter: LoraAdapter) -> Result<()> {
        adapter.validate(&self.cfg)?;
        let name = adapter.name.clone();
        self.adapters.insert(name.clone(), adapter);
        self.active = Some(name);
        Ok(())
    }

    /// Choose which attached adapter later forwards use; `None` runs the base model.
    pub fn select_lora(&mut self, name: Option<&str>) -> Result<()> {
        if let Some(n) = name {
            if !self.adapters.contains_key(n) {
                return Err(Error::BadLora(format!("no adapter named '{n}'")));
            }
        }
        self.active = name.map(str::to_string);
        Ok(())
    }

    pub fn detach_lora(&mut self, name: &str) -> Result<LoraAdapter> {
        let a = self.adapters.remove(name).ok_or_else(|| Error::BadLora(format!("no adapter named '{name}'")))?;
        if self.active.as_deref() == Some(name) {
            self.active = None;
        }
        Ok(a)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    pub fn active_lora(&self) -> Option<&str> {
        self.active.as_deref()
    }

    /// Drop the KV cache and start a fresh sequence.
    pub fn reset(&mut self) -> Result<()> {
        if let Some((_, ticket, _)) = self.pending.take() {
            self.store.await_prefetch(ticket, 0.0)?;
        }
        for l in 0..self.cfg.n_layers {
            self.store.create_kv_layer(l, self.kv_layout.record_bytes())?;
        }
        self.pos = 0;
        Ok(())
    }

    fn embed(&mut self, token: u32) -> Result<Vec<f32>> {
        let t = token as usize;
        if t >= self.cfg.vocab_size {
            return Err(Error::BadToken(format!("token {token} outside vocab {}", self.cfg.vocab_size)));
        }
        let h = self.cfg.hidden_size;
        match &self.embedding {
            Embedding::Dram(table) => {
                let row = table[t * h..(t + 1) * h].iter().map(|b| b.to_f32()).collect();
                self.store.charge_dram_read(2 * h);
                Ok(row)
            }
            Embedding::Flash(handle) => {
                let handle = *handle;
                let bytes = self.store.read_embedding_row(&handle, t)?;
                Ok(bytes.chunks_exact(2).map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32()).collect())
            }
        }
    }

    fn active_pair(&self, layer: usize, proj: Proj) -> Option<(&LoraPair, usize)> {
        let a = self.adapters.get(self.active.as_ref()?)?;
        a.entries.get(&(layer, proj)).map(|p| (p, a.rank))
    }

    /// `x [rows, in] -> [rows, out]` through the quantized GEMM, plus the
    /// active adapter's bypass on the same int8-rounded activations.
    fn run_linear(
        &self,
        w: &PackedWeights,
        lora: Option<(&LoraPair, usize)>,
        x: &[f32],
        rows: usize,
    ) -> Result<(Vec<f32>, u64, u64)> {
        let a = quantize_and_pack(x, rows, w.cols(), self.tiles)?;
        let mut out = vec![0f32; rows * w.rows()];
        let n = gemm_q_into(&a, w, &self.tiles, &self.pool, &mut out)?;
        let mut lora_n = 0;
        if let Some((pair, rank)) = lora {
            lora_n = apply_bypass(pair, rank, &a.dequantize(), rows, &mut out);
        }
        Ok((out, n, lora_n))
    }

    fn linear(&mut self, layer: usize, proj: Proj, x: &[f32], rows: usize) -> Result<Vec<f32>> {
        let w = &self.layers[layer].proj[proj.index()];
        let (out, n, lora_n) = self.run_linear(w, self.active_pair(layer, proj), x, rows)?;
        if self.count_accesses {
            self.stats.gemm_accesses += n;
            self.stats.lora_accesses += lora_n;
        }
        Ok(out)
    }

    fn issue_prefetch(&mut self, layer: usize) -> Result<()> {
        if !self.store.config().prefetch || self.pending.is_some() {
            return Ok(());
        }
        let covered = self.pos * self.kv_layout.record_bytes();
        let has_flash = self.store.kv_buffer(layer).is_some_and(|b| b.flash_len() > 0);
        if covered > 0 && has_flash {
            let ticket = self.store.prefetch_kv(layer, 0..covered)?;
            self.pending = Some((layer, ticket, covered));
        }
        Ok(())
    }

    fn read_history(&mut self, layer: usize, tokens: usize) -> Result<Vec<u8>> {
        let end = tokens * self.kv_layout.record_bytes();
        match self.pending.take() {
            Some((l, ticket, covered)) if l == layer => {
                let window = self.store.compute_window();
                let mut bytes = self.store.await_prefetch(ticket, window)?;
                bytes.extend(self.store.kv_read(layer, covered..end)?);
                Ok(bytes)
            }
            other => {
                self.pending = other;
                self.store.kv_read(layer, 0..end)
            }
        }
    }

    /// One decoder layer over `x [s, hidden]` at positions `pos..pos + s`.
    /// Appends the new keys and values to this layer's cache.
    pub fn forward_layer(&mut self, layer: usize, x: &[f32]) -> Result<Vec<f32>> {
        let cfg = &self.cfg;
        let (h, d, heads, kvh, eps) = (cfg.hidden_size, cfg.head_dim, cfg.n_heads, cfg.n_kv_heads, cfg.norm_eps);
        let theta = cfg.rope_theta;
        if layer >= cfg.n_layers || x.is_empty() || x.len() % h != 0 {
            return Err(Error::BadShape(format!("layer {layer} input of {} values, hidden {h}", x.len())));
        }
        let s = x.len() / h;
        let pos0 = self.pos;
        if pos0 + s > cfg.max_context {
            return Err(Error::CtxFull(format!("{} tokens exceed the context of {}", pos0 + s, cfg.max_context)));
        }
        let kvd = kvh * d;

        let xn = rms_norm_rows(x, &self.layers[layer].attn_norm, eps);
        let mut q = self.linear(layer, Proj::Q, &xn, s)?;
        let mut k = self.linear(layer, Proj::K, &xn, s)?;
        let v = self.linear(layer, Proj::V, &xn, s)?;
        apply_rope(&mut q, heads, d, pos0, theta);
        apply_rope(&mut k, kvh, d, pos0, theta);
        for t in 0..s {
            let (kb, vb) = self.kv_layout.encode(&k[t * kvd..(t + 1) * kvd], &v[t * kvd..(t + 1) * kvd])?;
            self.store.kv_append(layer, &kb, &vb)?;
        }
        let history = self.read_history(layer, pos0 + s)?;
        let view = KvView::new(self.kv_layout, &history)?;
        let mut qh = vec![0f32; s * h];
        apply_regions_typed(&q, &region_for_transpose(&[s, heads, d], &[1, 0, 2])?, &mut qh)?;
        let att = attention_with_pool(&qh, heads, s, &view, true, &self.pool)?;
        let mut merged = vec![0f32; s * h];
        apply_regions_typed(&att, &region_for_transpose(&[heads, s, d], &[1, 0, 2])?, &mut merged)?;
        let o = self.linear(layer, Proj::O, &merged, s)?;
        let mut x1: Vec<f32> = x.iter().zip(&o).map(|(a, b)| a + b).collect();

        let xn2 = rms_norm_rows(&x1, &self.layers[layer].ffn_norm, eps);
        let g = self.linear(layer, Proj::Gate, &xn2, s)?;
        let u = self.linear(layer, Proj::Up, &xn2, s)?;
        // the next layer's flash history streams in behind the MLP
        if s == 1 && layer + 1 < self.cfg.n_layers {
            self.issue_prefetch(layer + 1)?;
        }
        let act: Vec<f32> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
        let down = self.linear(layer, Proj::Down, &act, s)?;
        for (a, b) in x1.iter_mut().zip(&down) {
            *a += b;
        }
        Ok(x1)
    }

    fn forward(&mut self, tokens: &[u32]) -> Result<Vec<f32>> {
        let s = tokens.len();
        let h = self.cfg.hidden_size;
        if self.pos + s > self.cfg.max_context {
            return Err(Error::CtxFull(format!(
                "{} tokens exceed the context of {}",
                self.pos + s,
                self.cfg.max_context
            )));
        }
        let mut x = Vec::with_capacity(s * h);
        for &t in tokens {
            x.extend(self.embed(t)?);
        }
        if s == 1 {
            self.issue_prefetch(0)?;
        }
        for l in 0..self.cfg.n_layers {
            x = self.forward_layer(l, &x)?;
        }
        self.pos += s;
        let streamed = self.layer_bytes * self.cfg.n_layers as u64 + self.head_bytes;
        self.store.add_compute(streamed as f64 / self.store.config().dram_bandwidth);

        let last = rms_norm_rows(&x[(s - 1) * h..], &self.final_norm, self.cfg.norm_eps);
        let (mut logits, n, _) = self.run_linear(&self.lm_head, None, &last, 1)?;
        if self.count_accesses {
            self.stats.gemm_accesses += n;
        }
        if let Some(b) = &self.logit_bias {
            for (l, b) in logits.iter_mut().zip(b) {
                *l += b;
            }
        }
        Ok(logits)
    }

    /// Start a new sequence with `tokens`; returns the last position's logits.
    pub fn prefill(&mut self, tokens: &[u32]) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(Error::BadPrompt("prompt is empty".into()));
        }
        self.reset()?;
        let start = Instant::now();
        let logits = self.forward(tokens)?;
        self.stats.prefill_tokens += tokens.len() as u64;
        self.stats.prefill_seconds += start.elapsed().as_secs_f64();
        Ok(logits)
    }

    /// Feed one token after the cached history.
    pub fn decode_step(&mut self, token: u32) -> Result<Vec<f32>> {
        let start = Instant::now();
        let logits = self.forward(&[token])?;
        self.stats.decode_tokens += 1;
        self.stats.decode_seconds += start.elapsed().as_secs_f64();
        Ok(logits)
    }

    /// Greedy decoding: at most `max_new` tokens, stopping after EOS.
    pub fn generate(&mut self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        if max_new == 0 {
            return Err(Error::BadArg("max_new must be at least 1".into()));
        }
        let mut logits = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(max_new);
        loop {
            let next = argmax(&logits);
            out.push(next);
            if next == EOS || out.len() == max_new {
                return Ok(out);
            }
            logits = self.decode_step(next)?;
        }
    }
}

/// Read a model directory and build an engine.
pub fn load_model(dir: &Path, opts: EngineOptions) -> Result<Engine> {
    let (cfg, weights) = read_model_dir(dir)?;
    Engine::new(cfg, &weights, opts)
}
