//! Model directory: `config.json` plus `weights.bin`, a concatenation of
//! F32 tensor dumps in this order:
//!
//! embedding `[V, H]`; per layer attn_norm `[H]`, q `[H, H]`, k `[KV, H]`,
//! v `[KV, H]`, o `[H, H]`, ffn_norm `[H]`, gate `[I, H]`, up `[I, H]`,
//! down `[H, I]`; final_norm `[H]`; lm_head `[V, H]`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::runtime::config::ModelConfig;
use crate::tensor::{random_f32_values, ElementType, Tensor};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// Projections of one layer, in file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::BadLora(format!("projection index {i}")))
    }

    pub fn name(self) -> &'static str {
        ["q", "k", "v", "o", "gate", "up", "down"][self.index()]
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::BadArg(format!("unknown projection '{name}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    pub attn_norm: Vec<f32>,
    pub ffn_norm: Vec<f32>,
    /// `[out, in]` row-major, indexed by [`Proj::index`]
    pub proj: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embedding: Vec<f32>,
    pub layers: Vec<LayerTensors>,
    pub final_norm: Vec<f32>,
    pub lm_head: Vec<f32>,
}

/// Shapes of every tensor in `weights.bin`, in order.
pub fn tensor_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let (v, h) = (cfg.vocab_size, cfg.hidden_size);
    let lin = cfg.layer_linear_shapes();
    let mut shapes = vec![vec![v, h]];
    for _ in 0..cfg.n_layers {
        shapes.push(vec![h]);
        for &(o, i) in &lin[..4] {
            shapes.push(vec![o, i]);
        }
        shapes.push(vec![h]);
        for &(o, i) in &lin[4..] {
            shapes.push(vec![o, i]);
        }
    }
    shapes.push(vec![h]);
    shapes.push(vec![v, h]);
    shapes
}

impl ModelWeights {
    /// Deterministic random weights. Projections are scaled by
    /// `1/sqrt(fan_in)`, norm scales sit near 1.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let shapes = tensor_shapes(cfg);
        let mut tensors = Vec::with_capacity(shapes.len());
        for (idx, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let tseed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(idx as u64);
            let raw = random_f32_values(n, tseed);
            let values = if shape.len() == 1 {
                raw.iter().map(|r| 1.0 + 0.1 * r).collect()
            } else if idx == 0 {
                raw
            } else {
                let gain = 1.0 / (shape[1] as f32).sqrt();
                raw.iter().map(|r| r * gain).collect()
            };
            tensors.push(values);
        }
        Self::from_tensors(cfg, tensors)
    }

    fn from_tensors(cfg: &ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        let mut it = tensors.into_iter();
        let mut next = || it.next().ok_or_else(|| Error::BadModel("weights end early".into()));
        let embedding = next()?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let attn_norm = next()?;
            let mut proj = Vec::with_capacity(7);
            for _ in 0..4 {
                proj.push(next()?);
            }
            let ffn_norm = next()?;
            for _ in 0..3 {
                proj.push(next()?);
            }
            layers.push(LayerTensors { attn_norm, ffn_norm, proj });
        }
        let final_norm = next()?;
        let lm_head = next()?;
        Ok(Self { embedding, layers, final_norm, lm_head })
    }

    fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.embedding];
        for l in &self.layers {
            out.push(&l.attn_norm);
            for p in &l.proj[..4] {
                out.push(p);
            }
            out.push(&l.ffn_norm);
            for p in &l.proj[4..] {
                out.push(p);
            }
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    pub fn write_to<W: Write>(&self, cfg: &ModelConfig, w: &mut W) -> Result<()> {
        for (shape, values) in tensor_shapes(cfg).into_iter().zip(self.tensors()) {
            Tensor::from_f32(shape, values)?.write_dump(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(cfg: &ModelConfig, r: &mut R) -> Result<Self> {
        let shapes = tensor_shapes(cfg);
        let mut tensors = Vec::with_capacity(shapes.len());
        for shape in &shapes {
            let t = Tensor::read_dump(r)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::BadShape(format!("weights.bin tensor {:?}, expected {shape:?}", t.shape())));
            }
            if t.etype() != ElementType::F32 && t.etype() != ElementType::BF16 {
                return Err(Error::BadModel(format!("weights must be float, got {:?}", t.etype())));
            }
            tensors.push(t.to_f32_vec()?);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::BadModel("trailing bytes after the last tensor".into()));
        }
        Self::from_tensors(cfg, tensors)
    }
}

/// Write a model directory with deterministic random weights.
pub fn gen_model(cfg: &ModelConfig, seed: u64, dir: &Path) -> Result<()> {
    let weights = ModelWeights::random(cfg, seed)?;
    write_model_dir(dir, cfg, &weights)
}

pub fn write_model_dir(dir: &Path, cfg: &ModelConfig, weights: &ModelWeights) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
    let mut w = BufWriter::new(File::create(dir.join(WEIGHTS_FILE))?);
    weights.write_to(cfg, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_model_dir(dir: &Path) -> Result<(ModelConfig, ModelWeights)> {
    let cfg = ModelConfig::load(&dir.join(CONFIG_FILE))?;
    let path = dir.join(WEIGHTS_FILE);
    let file = File::open(&path).map_err(|e| Error::BadModel(format!("{}: {e}", path.display())))?;
    let weights = ModelWeights::read_from(&cfg, &mut BufReader::new(file))?;
    Ok((cfg, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_in_order() {
        let s = tensor_shapes(&ModelConfig::tiny());
        assert_eq!(s.len(), 1 + 2 * 9 + 2);
        assert_eq!(s[0], vec![256, 64]);
        assert_eq!(s[3], vec![32, 64]);
        assert_eq!(s[9], vec![64, 128]);
        let total: usize = s.iter().map(|x| x.iter().product::<usize>()).sum();
        assert_eq!(total as u64, ModelConfig::tiny().param_counts().total);
    }

    #[test]
    fn deterministic_and_round_trips() {
        let cfg = ModelConfig::tiny();
        let dir = tempfile::tempdir().unwrap();
        gen_model(&cfg, 42, &dir.path().join("a")).unwrap();
        gen_model(&cfg, 42, &dir.path().join("b")).unwrap();
        gen_model(&cfg, 43, &dir.path().join("c")).unwrap();
        let a = fs::read(dir.path().join("a").join(WEIGHTS_FILE)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(WEIGHTS_FILE)).unwrap());
        assert_ne!(a, fs::read(dir.path().join("c").join(WEIGHTS_FILE)).unwrap());
        let (c2, w2) = read_model_dir(&dir.path().join("a")).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(w2, ModelWeights::random(&cfg, 42).unwrap());
    }

    #[test]
    fn malformed_dirs() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(read_model_dir(dir.path()).unwrap_err().code(), "bad-model");
        let cfg = ModelConfig::tiny();
        gen_model(&cfg, 1, dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert_eq!(read_model_dir(dir.path()).unwrap_err().code(), "bad-model");
        let mut wide = cfg.clone();
        wide.intermediate_size = 256;
        fs::write(dir.path().join(CONFIG_FILE), wide.to_json()).unwrap();
        fs::write(&path, &bytes).unwrap();
        assert_eq!(read_model_dir(dir.path()).unwrap_err().code(), "bad-shape");
    }
}
