//! Low-rank adapters applied as a bypass next to the quantized base weights.
//!
//! For a projection `W [out, in]` an adapter holds a down-map `B [r, in]` and
//! an up-map `A [out, r]`; the adapted output is `W x + A (B x)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::runtime::config::ModelConfig;
use crate::runtime::weights::Proj;
use crate::tensor::{random_f32_values, ElementType, Tensor};

pub const LORA_MAGIC: &[u8; 8] = b"TFLORA01";

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub inputs: usize,
    pub outputs: usize,
    /// `[r, in]`
    pub down: Vec<f32>,
    /// `[out, r]`
    pub up: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub rank: usize,
    pub entries: BTreeMap<(usize, Proj), LoraPair>,
}

impl LoraAdapter {
    fn build(
        cfg: &ModelConfig,
        name: &str,
        rank: usize,
        targets: &[(usize, Proj)],
        mut fill: impl FnMut(usize, usize) -> Vec<f32>,
    ) -> Result<Self> {
        let lin = cfg.layer_linear_shapes();
        let mut entries = BTreeMap::new();
        for (n, &(layer, p)) in targets.iter().enumerate() {
            let (outputs, inputs) = lin[p.index()];
            let down = fill(2 * n, rank * inputs);
            let up = fill(2 * n + 1, outputs * rank);
            entries.insert((layer, p), LoraPair { inputs, outputs, down, up });
        }
        let a = Self { name: name.to_string(), rank, entries };
        a.validate(cfg)?;
        Ok(a)
    }

    pub fn zeros(cfg: &ModelConfig, name: &str, rank: usize, targets: &[(usize, Proj)]) -> Result<Self> {
        Self::build(cfg, name, rank, targets, |_, n| vec![0.0; n])
    }

    /// Uniform entries in `[-scale, scale)`.
    pub fn random(
        cfg: &ModelConfig,
        name: &str,
        rank: usize,
        targets: &[(usize, Proj)],
        seed: u64,
        scale: f32,
    ) -> Result<Self> {
        Self::build(cfg, name, rank, targets, |k, n| {
            random_f32_values(n, seed.wrapping_mul(31).wrapping_add(k as u64)).iter().map(|v| v * scale).collect()
        })
    }

    /// Every projection of every layer.
    pub fn all_targets(cfg: &ModelConfig) -> Vec<(usize, Proj)> {
        (0..cfg.n_layers).flat_map(|l| Proj::ALL.map(|p| (l, p))).collect()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::BadLora("rank must be positive".into()));
        }
        let lin = cfg.layer_linear_shapes();
        for (&(layer, p), pair) in &self.entries {
            let (outputs, inputs) = lin[p.index()];
            if layer >= cfg.n_layers
                || pair.inputs != inputs
                || pair.outputs != outputs
                || pair.down.len() != self.rank * inputs
                || pair.up.len() != outputs * self.rank
            {
                return Err(Error::BadLora(format!(
                    "adapter '{}' entry layer {layer} {} does not match [{outputs}, {inputs}] at rank {}",
                    self.name,
                    p.name(),
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// Rank is expected to be well below the hidden size.
    pub fn rank_is_large(&self, cfg: &ModelConfig) -> bool {
        self.rank > cfg.hidden_size / 8
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(LORA_MAGIC)?;
        w.write_all(&(self.rank as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (&(layer, p), pair) in &self.entries {
            w.write_all(&(layer as u32).to_le_bytes())?;
            w.write_all(&(p.index() as u32).to_le_bytes())?;
            Tensor::from_f32(vec![self.rank, pair.inputs], &pair.down)?.write_dump(w)?;
            Tensor::from_f32(vec![pair.outputs, self.rank], &pair.up)?.write_dump(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(name: &str, r: &mut R) -> Result<Self> {
        let bad = |m: &str| Error::BadLora(format!("adapter '{name}': {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != LORA_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32_at = || -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let rank = u32_at()?;
        let count = u32_at()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated entry"))?;
            let layer = u32::from_le_bytes(b[..4].try_into().unwrap()) as usize;
            let p = Proj::from_index(u32::from_le_bytes(b[4..].try_into().unwrap()) as usize)?;
            let read = |r: &mut R| -> Result<Tensor> {
                let t = Tensor::read_dump(r).map_err(|e| bad(&e.to_string()))?;
                if t.etype() != ElementType::F32 || t.shape().len() != 2 {
                    return Err(bad("maps must be rank-2 F32"));
                }
                Ok(t)
            };
            let down = read(r)?;
            let up = read(r)?;
            if down.shape()[0] != rank || up.shape()[1] != rank {
                return Err(bad("map rank differs from header"));
            }
            let pair = LoraPair {
                inputs: down.shape()[1],
                outputs: up.shape()[0],
                down: down.to_f32_vec()?,
                up: up.to_f32_vec()?,
            };
            entries.insert((layer, p), pair);
        }
        Ok(Self { name: name.to_string(), rank, entries })
    }

    /// Read `lora_<name>.bin`; the adapter takes its name from the file.
    pub fn load(path: &Path) -> Result<Self> {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("lora");
        let name = stem.strip_prefix("lora_").unwrap_or(stem);
        let file = File::open(path).map_err(|e| Error::BadLora(format!("{}: {e}", path.display())))?;
        Self::read_from(name, &mut BufReader::new(file))
    }

    pub fn save(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let path = dir.join(format!("lora_{}.bin", self.name));
        let mut w = BufWriter::new(File::create(&path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(path)
    }
}

/// `a [m, k] * b [k, n]`, returning the product and its element loads and
/// stores (`2mkn + mn`).
pub fn matmul_counted(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> (Vec<f32>, u64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0f32;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    (out, (2 * m * k * n + m * n) as u64)
}

/// `a [m, k] * b^T` with `b` stored `[n, k]`; same counting as [`matmul_counted`].
pub fn matmul_nt_counted(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> (Vec<f32>, u64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = row.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    (out, (2 * m * k * n + m * n) as u64)
}

/// Add the bypass `x B^T A^T` for `rows` activation rows into `out [rows, out]`.
/// Returns the element accesses of both products.
pub fn apply_bypass(pair: &LoraPair, rank: usize, x: &[f32], rows: usize, out: &mut [f32]) -> u64 {
    let (t, n1) = matmul_nt_counted(x, &pair.down, rows, pair.inputs, rank);
    let (y, n2) = matmul_nt_counted(&t, &pair.up, rows, rank, pair.outputs);
    for (o, d) in out.iter_mut().zip(&y) {
        *o += d;
    }
    n1 + n2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub flops: u128,
    pub mem: u128,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LoraCost {
    pub direct: Cost,
    pub reassociated: Cost,
    /// reassociated memory over direct memory
    pub ratio: f64,
}

/// Compute and memory of `(A B) X` versus `A (B X)` for `[h, h]` inputs and
/// rank-`r` maps.
pub fn lora_cost(h: u64, r: u64) -> Result<LoraCost> {
    if h == 0 || r == 0 {
        return Err(Error::BadArg("h and r must be at least 1".into()));
    }
    let (h, r) = (h as u128, r as u128);
    let direct = Cost { flops: r * h * h + h * h * h, mem: 2 * (r * h * h + h * h + h * h * h) };
    let reassociated = Cost { flops: 2 * r * h * h, mem: 4 * r * h * h + h * h + r * h };
    Ok(LoraCost { direct, reassociated, ratio: reassociated.mem as f64 / direct.mem as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_examples() {
        let c = lora_cost(3584, 8).unwrap();
        assert_eq!(c.reassociated.mem, 423_915_520);
        assert_eq!(c.direct.mem, 92_304_572_416);
        assert!(c.ratio > 0.004 && c.ratio < 0.005);
        let one = lora_cost(1, 1).unwrap();
        assert_eq!((one.direct.flops, one.reassociated.flops), (2, 2));
        // at r = h both orders cost the same; beyond it reassociation loses
        let even = lora_cost(64, 64).unwrap();
        assert_eq!(even.reassociated, even.direct);
        assert_eq!(even.ratio, 1.0);
        let deg = lora_cost(64, 128).unwrap();
        assert!(deg.reassociated.flops > deg.direct.flops);
        assert!(deg.ratio > 1.0);
        assert!(lora_cost(0, 1).is_err());
    }

    #[test]
    fn reassociation_agrees_and_counts_match_formula() {
        for (h, r) in [(16usize, 2usize), (24, 4), (32, 8)] {
            let a = random_f32_values(h * r, 1);
            let b = random_f32_values(r * h, 2);
            let x = random_f32_values(h * h, 3);
            let (ab, n1) = matmul_counted(&a, &b, h, r, h);
            let (direct, n2) = matmul_counted(&ab, &x, h, h, h);
            let (bx, n3) = matmul_counted(&b, &x, r, h, h);
            let (re, n4) = matmul_counted(&a, &bx, h, r, h);
            let num: f64 = direct.iter().zip(&re).map(|(p, q)| ((p - q) as f64).powi(2)).sum();
            let den: f64 = direct.iter().map(|p| (*p as f64).powi(2)).sum();
            assert!((num / den).sqrt() < 1e-4);
            let c = lora_cost(h as u64, r as u64).unwrap();
            assert_eq!((n1 + n2) as u128, c.direct.mem);
            assert!((n3 + n4) as u128 <= c.reassociated.mem);
        }
    }

    #[test]
    fn file_round_trip_and_validation() {
        let cfg = ModelConfig::tiny();
        let a = LoraAdapter::random(&cfg, "demo", 4, &[(0, Proj::Q), (1, Proj::Down)], 7, 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = a.save(dir.path()).unwrap();
        assert!(path.ends_with("lora_demo.bin"));
        assert_eq!(LoraAdapter::load(&path).unwrap(), a);
        let mut bad = a.clone();
        bad.entries.get_mut(&(0, Proj::Q)).unwrap().up.pop();
        assert_eq!(bad.validate(&cfg).unwrap_err().code(), "bad-lora");
        let mut other = cfg.clone();
        other.intermediate_size = 64;
        assert_eq!(a.validate(&other).unwrap_err().code(), "bad-lora");
        assert!(!a.rank_is_large(&cfg));
    }
}
