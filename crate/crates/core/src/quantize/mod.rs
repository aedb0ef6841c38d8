//! Asymmetric weight quantization, symmetric int8 activation quantization
//! and the KV-cache codecs (int8 keys, fp8 values).
//!
//! Weights use the affine code
//!
//! ```text
//! code = round((w - w_min) / ((w_max - w_min) / (clip_max - clip_min))) + clip_min
//! ```
//!
//! with `round` = half away from zero. A block whose values are all equal
//! gets `scale = 1` and every code equal to `clip_min`.

pub mod fp8;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ElementType, Tensor};

pub use fp8::{decode_fp8, decode_values, encode_fp8, encode_values, Fp8E4M3};

pub const QTENSOR_MAGIC: &[u8; 8] = b"TFQUANT1";
pub const DEFAULT_BLOCK_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantBits {
    #[serde(rename = "4")]
    Int4,
    #[serde(rename = "8")]
    Int8,
}

impl QuantBits {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            4 => Ok(QuantBits::Int4),
            8 => Ok(QuantBits::Int8),
            b => Err(Error::BadArg(format!("unsupported bit width {b}"))),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            QuantBits::Int4 => 4,
            QuantBits::Int8 => 8,
        }
    }

    pub fn clip_range(self) -> (i32, i32) {
        match self {
            QuantBits::Int4 => (-8, 7),
            QuantBits::Int8 => (-128, 127),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub w_min: f32,
    pub clip_min: i32,
    pub clip_max: i32,
}

impl QuantParams {
    pub fn new(scale: f32, w_min: f32, bits: QuantBits) -> Self {
        let (clip_min, clip_max) = bits.clip_range();
        Self { scale, w_min, clip_min, clip_max }
    }

    /// Parameters that decode every code to exactly zero; used for padding.
    pub fn zero(bits: QuantBits) -> Self {
        Self::new(0.0, 0.0, bits)
    }

    #[inline]
    pub fn dequant(&self, code: i32) -> f32 {
        ((code - self.clip_min) as f64 * self.scale as f64 + self.w_min as f64) as f32
    }
}

/// Quantize one block with the asymmetric affine code.
pub fn quant_asym(values: &[f32], bits: QuantBits) -> (Vec<i8>, QuantParams) {
    let (clip_min, clip_max) = bits.clip_range();
    let w_min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let w_max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let scale = ((w_max as f64 - w_min as f64) / (clip_max - clip_min) as f64) as f32;
    if values.is_empty() || !(scale > 0.0) || !scale.is_finite() {
        let w_min = if values.is_empty() { 0.0 } else { w_min };
        return (vec![clip_min as i8; values.len()], QuantParams::new(1.0, w_min, bits));
    }
    // exact ratio rather than the f32-rounded scale, so ties land where the
    // real-valued formula puts them
    let steps = (clip_max - clip_min) as f64 / (w_max as f64 - w_min as f64);
    let codes = values
        .iter()
        .map(|&w| {
            let q = ((w as f64 - w_min as f64) * steps).round() as i64 + clip_min as i64;
            q.clamp(clip_min as i64, clip_max as i64) as i8
        })
        .collect();
    (codes, QuantParams::new(scale, w_min, bits))
}

pub fn dequant_asym(codes: &[i8], params: &QuantParams) -> Result<Vec<f32>> {
    codes
        .iter()
        .map(|&c| {
            let c = c as i32;
            if c < params.clip_min || c > params.clip_max {
                Err(Error::BadCode(format!(
                    "code {c} outside [{}, {}]",
                    params.clip_min, params.clip_max
                )))
            } else {
                Ok(params.dequant(c))
            }
        })
        .collect()
}

/// Symmetric per-row int8 activation quantization: `scale = max|x| / 127`.
pub fn quant_activations_i8(x: &[f32]) -> (Vec<i8>, f32) {
    let max = x.iter().fold(0f32, |m, v| m.max(v.abs()));
    if !(max > 0.0) {
        return (vec![0; x.len()], 1.0);
    }
    let inv = 127.0 / max as f64;
    let codes = x
        .iter()
        .map(|&v| (v as f64 * inv).round().clamp(-127.0, 127.0) as i8)
        .collect();
    (codes, max / 127.0)
}

/// Per-token key quantization. Each call is independent, so appending keys
/// never touches what was stored before.
pub fn quant_key(k: &[f32], bits: QuantBits) -> (Vec<i8>, QuantParams) {
    quant_asym(k, bits)
}

/// Block-quantized `[h, l]` weight matrix.
///
/// Codes are stored row-major; 4-bit codes are packed two per byte, low
/// nibble first, as two's-complement nibbles.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    rows: usize,
    cols: usize,
    bits: QuantBits,
    block_size: usize,
    params: Vec<QuantParams>,
    codes: Vec<u8>,
}

impl QTensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> QuantBits {
        self.bits
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn blocks_per_row(&self) -> usize {
        self.cols / self.block_size
    }

    pub fn params(&self) -> &[QuantParams] {
        &self.params
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn block_params(&self, row: usize, block: usize) -> &QuantParams {
        &self.params[row * self.blocks_per_row() + block]
    }

    #[inline]
    pub fn code(&self, row: usize, col: usize) -> i8 {
        let idx = row * self.cols + col;
        match self.bits {
            QuantBits::Int8 => self.codes[idx] as i8,
            QuantBits::Int4 => {
                let byte = self.codes[idx / 2];
                let nib = if idx % 2 == 0 { byte & 0x0F } else { byte >> 4 };
                ((nib << 4) as i8) >> 4
            }
        }
    }

    /// Bytes occupied by codes plus per-block `(scale, w_min)` pairs.
    pub fn storage_bytes(&self) -> usize {
        self.codes.len() + self.params.len() * 8
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let p = self.block_params(r, c / self.block_size);
                out.push(p.dequant(self.code(r, c) as i32));
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(QTENSOR_MAGIC)?;
        for v in [self.bits.bits(), self.block_size as u32, self.rows as u32, self.cols as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.scale.to_le_bytes())?;
            w.write_all(&p.w_min.to_le_bytes())?;
        }
        w.write_all(&self.codes)?;
        Ok(())
    }

    /// Read a record written by [`QTensor::write_to`], magic included.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad_model)?;
        if &magic != QTENSOR_MAGIC {
            return Err(Error::BadModel("missing quantized tensor magic".into()));
        }
        Self::read_body(r)
    }

    pub(crate) fn read_body<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(bad_model)?;
        let field = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let bits = QuantBits::from_bits(field(0) as u32).map_err(|e| Error::BadModel(e.to_string()))?;
        let (block_size, rows, cols) = (field(1), field(2), field(3));
        if block_size == 0 || rows == 0 || cols == 0 || cols % block_size != 0 {
            return Err(Error::BadModel(format!(
                "bad quantized header block={block_size} h={rows} l={cols}"
            )));
        }
        let n_params = rows * (cols / block_size);
        let mut raw = vec![0u8; n_params * 8];
        r.read_exact(&mut raw).map_err(bad_model)?;
        let params = raw
            .chunks_exact(8)
            .map(|c| {
                let scale = f32::from_le_bytes(c[0..4].try_into().unwrap());
                let w_min = f32::from_le_bytes(c[4..8].try_into().unwrap());
                QuantParams::new(scale, w_min, bits)
            })
            .collect();
        let code_bytes = match bits {
            QuantBits::Int8 => rows * cols,
            QuantBits::Int4 => (rows * cols).div_ceil(2),
        };
        let mut codes = vec![0u8; code_bytes];
        r.read_exact(&mut codes).map_err(bad_model)?;
        Ok(Self { rows, cols, bits, block_size, params, codes })
    }
}

fn bad_model(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::BadModel("truncated quantized tensor".into())
    } else {
        Error::Io(e)
    }
}

fn pack_codes(codes: &[i8], bits: QuantBits) -> Vec<u8> {
    match bits {
        QuantBits::Int8 => codes.iter().map(|&c| c as u8).collect(),
        QuantBits::Int4 => codes
            .chunks(2)
            .map(|pair| {
                let lo = pair[0] as u8 & 0x0F;
                let hi = pair.get(1).map_or(0, |&c| c as u8 & 0x0F);
                lo | (hi << 4)
            })
            .collect(),
    }
}

/// Quantize a `[h, l]` float matrix block-by-block along `l`.
pub fn quantize_weights(w: &Tensor, bits: QuantBits, block_size: usize) -> Result<QTensor> {
    let shape = w.shape();
    if shape.len() != 2 {
        return Err(Error::BadShape(format!("weights must be rank 2, got {shape:?}")));
    }
    let (rows, cols) = (shape[0], shape[1]);
    if block_size == 0 || cols % block_size != 0 {
        return Err(Error::BadBlock(format!("block size {block_size} does not divide l={cols}")));
    }
    let values = w.to_f32_vec()?;
    quantize_matrix(&values, rows, cols, bits, block_size)
}

pub fn quantize_matrix(
    values: &[f32],
    rows: usize,
    cols: usize,
    bits: QuantBits,
    block_size: usize,
) -> Result<QTensor> {
    if block_size == 0 || cols % block_size != 0 {
        return Err(Error::BadBlock(format!("block size {block_size} does not divide l={cols}")));
    }
    if values.len() != rows * cols {
        return Err(Error::BadShape(format!("{} values for [{rows}, {cols}]", values.len())));
    }
    let mut codes = Vec::with_capacity(rows * cols);
    let mut params = Vec::with_capacity(rows * cols / block_size);
    for block in values.chunks_exact(block_size) {
        let (c, p) = quant_asym(block, bits);
        codes.extend_from_slice(&c);
        params.push(p);
    }
    Ok(QTensor { rows, cols, bits, block_size, params, codes: pack_codes(&codes, bits) })
}

impl QTensor {
    /// Dense F32 tensor of the dequantized weights.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f32(vec![self.rows, self.cols], &self.dequantize())
    }

    pub fn etype(&self) -> ElementType {
        match self.bits {
            QuantBits::Int4 => ElementType::I4P,
            QuantBits::Int8 => ElementType::I8,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::random_f32_values;
    use proptest::prelude::*;

    /// Direct evaluation of the affine code in f64 (half away from zero).
    fn oracle_code(w: f64, w_min: f64, w_max: f64, cmin: i32, cmax: i32) -> i32 {
        let scale = (w_max - w_min) / (cmax - cmin) as f64;
        ((w - w_min) / scale).round() as i32 + cmin
    }

    #[test]
    fn worked_int4_example() {
        let (codes, p) = quant_asym(&[-1.0, 1.0, 0.5], QuantBits::Int4);
        assert_eq!(p.w_min, -1.0);
        assert_eq!(p.scale, (2.0f64 / 15.0) as f32);
        assert_eq!(codes, vec![-8, 7, 3]);
        assert_eq!(oracle_code(0.5, -1.0, 1.0, -8, 7), 3);
    }

    #[test]
    fn extremes_hit_clip_bounds() {
        for bits in [QuantBits::Int4, QuantBits::Int8] {
            let vals = random_f32_values(64, 5);
            let (codes, p) = quant_asym(&vals, bits);
            let imin = vals.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let imax = vals.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(codes[imin] as i32, p.clip_min);
            assert_eq!(codes[imax] as i32, p.clip_max);
            let deq = dequant_asym(&codes, &p).unwrap();
            assert_eq!(deq[imin], vals[imin]);
            assert!((deq[imax] - vals[imax]).abs() <= p.scale);
        }
    }

    #[test]
    fn constant_block() {
        let (codes, p) = quant_asym(&[0.25; 8], QuantBits::Int8);
        assert_eq!(p.scale, 1.0);
        assert!(codes.iter().all(|&c| c == -128));
        assert_eq!(dequant_asym(&codes, &p).unwrap(), vec![0.25; 8]);
    }

    #[test]
    fn dequant_rejects_bad_code() {
        let p = QuantParams::new(0.1, 0.0, QuantBits::Int4);
        assert_eq!(dequant_asym(&[8], &p).unwrap_err().code(), "bad-code");
        assert_eq!(dequant_asym(&[-9], &p).unwrap_err().code(), "bad-code");
    }

    #[test]
    fn round_trip_256_int8() {
        let vals = random_f32_values(256, 21);
        let (codes, p) = quant_asym(&vals, QuantBits::Int8);
        let deq = dequant_asym(&codes, &p).unwrap();
        for (w, d) in vals.iter().zip(&deq) {
            let err = (*w as f64 - *d as f64).abs();
            // half a step, plus the f32 rounding of the reconstructed value
            assert!(err <= p.scale as f64 / 2.0 + f32::EPSILON as f64 * d.abs() as f64);
        }
        for (i, &w) in vals.iter().enumerate() {
            let wmin = p.w_min as f64;
            let wmax = vals.iter().copied().fold(f32::MIN, f32::max) as f64;
            let want = oracle_code(w as f64, wmin, wmax, -128, 127);
            assert!((codes[i] as i32 - want).abs() <= 1);
        }
    }

    #[test]
    fn quantize_weights_example_and_errors() {
        let w = Tensor::from_f32(vec![1, 4], &[-1.0, 1.0, 0.5, 0.0]).unwrap();
        let q = quantize_weights(&w, QuantBits::Int4, 4).unwrap();
        let codes: Vec<i8> = (0..4).map(|c| q.code(0, c)).collect();
        // 0.0 -> round(7.5) + (-8) = 0
        assert_eq!(codes, vec![-8, 7, 3, 0]);
        assert_eq!(q.params().len(), 1);
        assert_eq!(q.packed_codes().len(), 2);

        let bad = quantize_weights(&w, QuantBits::Int4, 3).unwrap_err();
        assert_eq!(bad.code(), "bad-block");

        let zeros = Tensor::from_f32(vec![2, 8], &[0.0; 16]).unwrap();
        let qz = quantize_weights(&zeros, QuantBits::Int8, 4).unwrap();
        assert_eq!(qz.params().len(), 4);
        assert!(qz.params().iter().all(|p| p.scale == 1.0));
        assert!((0..2).all(|r| (0..8).all(|c| qz.code(r, c) == -128)));
    }

    #[test]
    fn rows_are_independent() {
        let a = random_f32_values(16, 1);
        let b = random_f32_values(16, 2);
        let ab: Vec<f32> = a.iter().chain(&b).copied().collect();
        let ba: Vec<f32> = b.iter().chain(&a).copied().collect();
        let q1 = quantize_matrix(&ab, 2, 16, QuantBits::Int4, 8).unwrap();
        let q2 = quantize_matrix(&ba, 2, 16, QuantBits::Int4, 8).unwrap();
        for c in 0..16 {
            assert_eq!(q1.code(0, c), q2.code(1, c));
            assert_eq!(q1.code(1, c), q2.code(0, c));
        }
        assert_eq!(q1.block_params(0, 1), q2.block_params(1, 1));
    }

    #[test]
    fn activation_examples() {
        assert_eq!(quant_activations_i8(&[0.0, 0.0]), (vec![0, 0], 1.0));
        assert_eq!(quant_activations_i8(&[-127.0, 127.0]), (vec![-127, 127], 1.0));
        let (codes, scale) = quant_activations_i8(&[0.5, -0.25, 1.0]);
        assert_eq!(scale, 1.0 / 127.0);
        // exact: 0.5 * 127 = 63.5 -> 64, -0.25 * 127 = -31.75 -> -32
        assert_eq!(codes, vec![64, -32, 127]);
    }

    #[test]
    fn key_append_only() {
        let first = random_f32_values(16, 100);
        let mut store: Vec<u8> = Vec::new();
        let (c0, p0) = quant_key(&first, QuantBits::Int8);
        store.extend(c0.iter().map(|&c| c as u8));
        let snapshot = store.clone();
        for t in 0..100 {
            let (c, _) = quant_key(&random_f32_values(16, 200 + t), QuantBits::Int8);
            store.extend(c.iter().map(|&c| c as u8));
        }
        assert_eq!(&store[..16], &snapshot[..]);
        let (again, p_again) = quant_key(&first, QuantBits::Int8);
        assert_eq!(p0, p_again);
        assert_eq!(c0, again);
    }

    #[test]
    fn constant_key_is_exact() {
        let (c, p) = quant_key(&[0.75; 16], QuantBits::Int8);
        assert!(c.iter().all(|&x| x == -128));
        assert_eq!(dequant_asym(&c, &p).unwrap(), vec![0.75; 16]);
    }

    #[test]
    fn qtensor_serialization() {
        let vals = random_f32_values(6 * 32, 9);
        for bits in [QuantBits::Int4, QuantBits::Int8] {
            let q = quantize_matrix(&vals, 6, 32, bits, 16).unwrap();
            let mut buf = Vec::new();
            q.write_to(&mut buf).unwrap();
            assert_eq!(&buf[8..12], &bits.bits().to_le_bytes());
            assert_eq!(&buf[12..16], &16u32.to_le_bytes());
            let back = QTensor::read_from(&mut buf.as_slice()).unwrap();
            assert_eq!(back, q);
            assert_eq!(QTensor::read_from(&mut &buf[..30]).unwrap_err().code(), "bad-model");
        }
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(vals in proptest::collection::vec(-100.0f32..100.0, 1..64), eight in any::<bool>()) {
            let bits = if eight { QuantBits::Int8 } else { QuantBits::Int4 };
            let (codes, p) = quant_asym(&vals, bits);
            for i in 0..vals.len() {
                for j in 0..vals.len() {
                    if vals[i] <= vals[j] {
                        prop_assert!(codes[i] <= codes[j]);
                    }
                }
            }
            let deq = dequant_asym(&codes, &p).unwrap();
            for (w, d) in vals.iter().zip(&deq) {
                let slack = f32::EPSILON as f64 * d.abs().max(w.abs()) as f64;
                prop_assert!((*w as f64 - *d as f64).abs() <= p.scale as f64 / 2.0 + slack);
            }
            // requantizing the reconstruction reproduces the codes
            let (again, _) = quant_asym(&deq, bits);
            prop_assert_eq!(again, codes);
        }
    }
}
