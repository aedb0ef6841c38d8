//! Mixed-precision attention over the quantized KV history.
//!
//! The query is pre-scaled by `1/sqrt(d)` before `Q K^T`, softmax runs in
//! `f32` with max subtraction, keys are dequantized from per-token int8 (or
//! int4) codes and values are decoded from E4M3. The cache is consumed in
//! its stored record layout, so historical entries are never rearranged.

use std::sync::OnceLock;

use half::bf16;

use crate::error::{Error, Result};
use crate::quantize::{fp8, quant_key, QuantBits, QuantParams};
use crate::scheduler::Pool;
use crate::tensor::Tensor;

/// Softmax over each row of an `[n, m]` float tensor, computed in `f32`.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::BadShape(format!("softmax_rows expects rank 2, got {:?}", x.shape())));
    }
    let mut v = x.to_f32_vec()?;
    for row in v.chunks_exact_mut(x.shape()[1]) {
        softmax_in_place(row);
    }
    Tensor::from_f32(x.shape().to_vec(), &v)
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax of a half-width row: the inputs arrive as BF16 but every
/// intermediate is widened to `f32`.
pub fn softmax_bf16_row(row: &[bf16]) -> Vec<f32> {
    let mut v: Vec<f32> = row.iter().map(|x| x.to_f32()).collect();
    softmax_in_place(&mut v);
    v
}

fn fp8_table() -> &'static [f32; 256] {
    static TABLE: OnceLock<[f32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|b| fp8::Fp8E4M3(b as u8).decode()))
}

/// Byte layout of one cached token: for every KV head the key codes followed
/// by its `(scale, w_min)` pair as little-endian `f32`, then the E4M3 value
/// bytes of every KV head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvLayout {
    pub kv_heads: usize,
    pub head_dim: usize,
    pub key_bits: QuantBits,
}

impl KvLayout {
    pub fn key_code_bytes(&self) -> usize {
        match self.key_bits {
            QuantBits::Int8 => self.head_dim,
            QuantBits::Int4 => self.head_dim.div_ceil(2),
        }
    }

    fn key_stride(&self) -> usize {
        self.key_code_bytes() + 8
    }

    pub fn key_bytes(&self) -> usize {
        self.kv_heads * self.key_stride()
    }

    pub fn value_bytes(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub fn record_bytes(&self) -> usize {
        self.key_bytes() + self.value_bytes()
    }

    /// Quantize one token's keys and values (`[kv_heads * head_dim]` each)
    /// into `(key bytes, value bytes)`.
    pub fn encode(&self, k: &[f32], v: &[f32]) -> Result<(Vec<u8>, Vec<u8>)> {
        let n = self.kv_heads * self.head_dim;
        if k.len() != n || v.len() != n {
            return Err(Error::BadShape(format!("kv record needs {n} keys and values")));
        }
        let mut kb = Vec::with_capacity(self.key_bytes());
        for head in k.chunks_exact(self.head_dim) {
            let (codes, p) = quant_key(head, self.key_bits);
            match self.key_bits {
                QuantBits::Int8 => kb.extend(codes.iter().map(|&c| c as u8)),
                QuantBits::Int4 => kb.extend(codes.chunks(2).map(|p| {
                    (p[0] as u8 & 0x0F) | (p.get(1).map_or(0, |&c| c as u8 & 0x0F) << 4)
                })),
            }
            kb.extend_from_slice(&p.scale.to_le_bytes());
            kb.extend_from_slice(&p.w_min.to_le_bytes());
        }
        Ok((kb, fp8::encode_values(v)?))
    }
}

/// Read-only view over `len` consecutive token records.
#[derive(Debug, Clone, Copy)]
pub struct KvView<'a> {
    layout: KvLayout,
    bytes: &'a [u8],
    len: usize,
}

impl<'a> KvView<'a> {
    pub fn new(layout: KvLayout, bytes: &'a [u8]) -> Result<Self> {
        let rec = layout.record_bytes();
        if bytes.len() % rec != 0 {
            return Err(Error::BadShape(format!("{} bytes is not a whole number of {rec}-byte records", bytes.len())));
        }
        Ok(Self { layout, bytes, len: bytes.len() / rec })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layout(&self) -> KvLayout {
        self.layout
    }

    fn record(&self, t: usize) -> &'a [u8] {
        let rec = self.layout.record_bytes();
        &self.bytes[t * rec..(t + 1) * rec]
    }

    pub fn key_params(&self, t: usize, kv_head: usize) -> QuantParams {
        let stride = self.layout.key_stride();
        let base = kv_head * stride + self.layout.key_code_bytes();
        let r = self.record(t);
        let scale = f32::from_le_bytes(r[base..base + 4].try_into().unwrap());
        let w_min = f32::from_le_bytes(r[base + 4..base + 8].try_into().unwrap());
        QuantParams::new(scale, w_min, self.layout.key_bits)
    }

    /// Dequantized key of token `t`, KV head `kv_head`, into `dst`.
    pub fn key_into(&self, t: usize, kv_head: usize, dst: &mut [f32]) {
        let p = self.key_params(t, kv_head);
        let r = self.record(t);
        let codes = &r[kv_head * self.layout.key_stride()..][..self.layout.key_code_bytes()];
        for (j, d) in dst.iter_mut().enumerate().take(self.layout.head_dim) {
            let code = match self.layout.key_bits {
                QuantBits::Int8 => codes[j] as i8,
                QuantBits::Int4 => {
                    let b = codes[j / 2];
                    let nib = if j % 2 == 0 { b & 0x0F } else { b >> 4 };
                    ((nib << 4) as i8) >> 4
                }
            };
            *d = p.dequant(code as i32);
        }
    }

    pub fn value_codes(&self, t: usize, kv_head: usize) -> &'a [u8] {
        let d = self.layout.head_dim;
        &self.record(t)[self.layout.key_bytes() + kv_head * d..][..d]
    }

    pub fn value_into(&self, t: usize, kv_head: usize, dst: &mut [f32]) {
        let table = fp8_table();
        for (d, &b) in dst.iter_mut().zip(self.value_codes(t, kv_head)) {
            *d = table[b as usize];
        }
    }
}

fn attend_head(q: &[f32], s_q: usize, d: usize, kv: &KvView<'_>, kv_head: usize, causal: bool, out: &mut [f32]) {
    let len = kv.len();
    let mut keys = vec![0f32; len * d];
    for t in 0..len {
        kv.key_into(t, kv_head, &mut keys[t * d..(t + 1) * d]);
    }
    let mut values = vec![0f32; len * d];
    for t in 0..len {
        kv.value_into(t, kv_head, &mut values[t * d..(t + 1) * d]);
    }
    let inv_sqrt = 1.0 / (d as f32).sqrt();
    let first_pos = len - s_q;
    let mut qs = vec![0f32; d];
    let mut scores = vec![0f32; len];
    for i in 0..s_q {
        for (dst, &x) in qs.iter_mut().zip(&q[i * d..(i + 1) * d]) {
            *dst = x * inv_sqrt;
        }
        let visible = if causal { first_pos + i + 1 } else { len };
        let row = &mut scores[..visible];
        for (t, s) in row.iter_mut().enumerate() {
            *s = qs.iter().zip(&keys[t * d..(t + 1) * d]).map(|(a, b)| a * b).sum();
        }
        softmax_in_place(row);
        let o = &mut out[i * d..(i + 1) * d];
        o.fill(0.0);
        for (t, &p) in row.iter().enumerate() {
            for (acc, &v) in o.iter_mut().zip(&values[t * d..(t + 1) * d]) {
                *acc += p * v;
            }
        }
    }
}

/// Grouped-query attention of `q` (`[heads, s_q, d]`, row-major) against the
/// cached history. The queries are the last `s_q` positions of the cache;
/// with `causal` each attends only to itself and earlier tokens. Heads are
/// spread across `pool`.
pub fn attention_with_pool(
    q: &[f32],
    heads: usize,
    s_q: usize,
    kv: &KvView<'_>,
    causal: bool,
    pool: &Pool,
) -> Result<Vec<f32>> {
    let d = kv.layout().head_dim;
    let kv_heads = kv.layout().kv_heads;
    if heads == 0 || kv_heads == 0 || heads % kv_heads != 0 {
        return Err(Error::BadShape(format!("{heads} query heads cannot share {kv_heads} kv heads")));
    }
    if q.len() != heads * s_q * d || s_q == 0 || s_q > kv.len() {
        return Err(Error::BadShape(format!(
            "query of {} values for {heads} heads x {s_q} tokens x {d} with {} cached",
            q.len(),
            kv.len()
        )));
    }
    let group = heads / kv_heads;
    let mut out = vec![0f32; q.len()];
    let per_head = s_q * d;
    let ranges: Vec<_> = pool
        .partition(heads)
        .into_iter()
        .map(|r| r.start * per_head..r.end * per_head)
        .collect();
    pool.parallel_chunks(&mut out, &ranges, |_, elems, chunk| {
        let h0 = elems.start / per_head;
        for (k, o) in chunk.chunks_exact_mut(per_head).enumerate() {
            let h = h0 + k;
            attend_head(&q[h * per_head..(h + 1) * per_head], s_q, d, kv, h / group, causal, o);
        }
    });
    Ok(out)
}

/// Single-threaded attention over a `[heads, s_q, d]` query tensor.
pub fn attention(q: &Tensor, kv: &KvView<'_>, causal: bool) -> Result<Tensor> {
    let shape = q.shape();
    if shape.len() != 3 || shape[2] != kv.layout().head_dim {
        return Err(Error::BadShape(format!("query shape {shape:?}")));
    }
    let values = q.to_f32_vec()?;
    let out = attention_with_pool(&values, shape[0], shape[1], kv, causal, &Pool::single())?;
    Tensor::from_f32(shape.to_vec(), &out)
}

/// Helper used by tests and tooling: encode per-token `[kv_heads * d]` keys
/// and values into one contiguous record buffer.
pub fn encode_history(layout: &KvLayout, keys: &[Vec<f32>], values: &[Vec<f32>]) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    for (k, v) in keys.iter().zip(values) {
        let (kb, vb) = layout.encode(k, v)?;
        bytes.extend(kb);
        bytes.extend(vb);
    }
    Ok(bytes)
}

pub fn query_tensor(heads: usize, s_q: usize, d: usize, values: &[f32]) -> Result<Tensor> {
    Tensor::from_f32(vec![heads, s_q, d], values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{random_f32_values, ElementType};
    use proptest::prelude::*;

    fn layout(kv_heads: usize, d: usize) -> KvLayout {
        KvLayout { kv_heads, head_dim: d, key_bits: QuantBits::Int8 }
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_f32(vec![1, 2], &[0.0, 0.0]).unwrap();
        assert_eq!(softmax_rows(&t).unwrap().to_f32_vec().unwrap(), vec![0.5, 0.5]);
        let u = Tensor::from_f32(vec![1, 3], &[2.5; 3]).unwrap();
        for p in softmax_rows(&u).unwrap().to_f32_vec().unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_large_inputs_stay_finite() {
        let t = Tensor::from_f32(vec![1, 2], &[60000.0, 59999.0]).unwrap();
        let p = softmax_rows(&t.cast(ElementType::BF16).unwrap().cast(ElementType::F32).unwrap()).unwrap();
        let p = p.to_f32_vec().unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        let f = softmax_rows(&t).unwrap().to_f32_vec().unwrap();
        // e / (1 + e) for a unit gap
        let want = std::f64::consts::E / (1.0 + std::f64::consts::E);
        assert!((f[0] as f64 - want).abs() < 1e-6);
        assert!((f[1] as f64 - (1.0 - want)).abs() < 1e-6);
    }

    #[test]
    fn single_token_returns_value() {
        let l = layout(1, 4);
        let k = vec![0.5, -0.25, 1.0, 0.0];
        let v = vec![1.0, 2.0, -0.5, 0.125];
        let bytes = encode_history(&l, &[k.clone()], &[v.clone()]).unwrap();
        let view = KvView::new(l, &bytes).unwrap();
        let q = query_tensor(1, 1, 4, &k).unwrap();
        let out = attention(&q, &view, true).unwrap().to_f32_vec().unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn matches_dense_f64_oracle() {
        let (heads, len, d) = (2, 5, 8);
        let lay = layout(2, d);
        let keys: Vec<Vec<f32>> = (0..len).map(|t| random_f32_values(2 * d, 100 + t as u64)).collect();
        let values: Vec<Vec<f32>> = (0..len).map(|t| random_f32_values(2 * d, 200 + t as u64)).collect();
        let bytes = encode_history(&lay, &keys, &values).unwrap();
        let kv = KvView::new(lay, &bytes).unwrap();
        let q: Vec<f32> = random_f32_values(heads * len * d, 7).iter().map(|v| v * 3.0).collect();
        for causal in [false, true] {
            let out = attention(&query_tensor(heads, len, d, &q).unwrap(), &kv, causal).unwrap().to_f32_vec().unwrap();
            let mut max_err = 0f64;
            for h in 0..heads {
                let (mut k, mut v) = (vec![0f32; d], vec![0f32; d]);
                let mut kd = Vec::new();
                let mut vd = Vec::new();
                for t in 0..len {
                    kv.key_into(t, h, &mut k);
                    kv.value_into(t, h, &mut v);
                    kd.push(k.iter().map(|&x| x as f64).collect::<Vec<_>>());
                    vd.push(v.iter().map(|&x| x as f64).collect::<Vec<_>>());
                }
                for i in 0..len {
                    let qi = &q[(h * len + i) * d..(h * len + i + 1) * d];
                    let visible = if causal { i + 1 } else { len };
                    let s: Vec<f64> = (0..visible)
                        .map(|t| qi.iter().zip(&kd[t]).map(|(a, b)| *a as f64 * b).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                    for j in 0..d {
                        let want: f64 = (0..visible).map(|t| (s[t] - m).exp() / z * vd[t][j]).sum();
                        let got = out[(h * len + i) * d + j] as f64;
                        max_err = max_err.max((got - want).abs());
                    }
                }
            }
            assert!(max_err <= 1e-3, "max abs error {max_err}");
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let l = layout(1, 4);
        let k = vec![0.3, 0.1, -0.2, 0.7];
        let v1 = vec![1.0, 2.0, 3.0, 4.0];
        let v2 = vec![3.0, 0.0, -1.0, 8.0];
        let bytes = encode_history(&l, &[k.clone(), k.clone()], &[v1.clone(), v2.clone()]).unwrap();
        let view = KvView::new(l, &bytes).unwrap();
        let q = query_tensor(1, 1, 4, &[0.9, -0.4, 0.2, 0.1]).unwrap();
        let out = attention(&q, &view, false).unwrap().to_f32_vec().unwrap();
        for j in 0..4 {
            assert!((out[j] - (v1[j] + v2[j]) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_mapping() {
        let l = layout(2, 4);
        let bytes = encode_history(&l, &[vec![0.0; 8]], &[vec![0.0; 8]]).unwrap();
        let view = KvView::new(l, &bytes).unwrap();
        let q = vec![0.0; 3 * 4];
        assert_eq!(attention_with_pool(&q, 3, 1, &view, true, &Pool::single()).unwrap_err().code(), "bad-shape");
        let q = vec![0.0; 2 * 2 * 4];
        assert_eq!(attention_with_pool(&q, 2, 2, &view, true, &Pool::single()).unwrap_err().code(), "bad-shape");
    }

    #[test]
    fn int4_keys_round_trip() {
        let l = KvLayout { kv_heads: 2, head_dim: 5, key_bits: QuantBits::Int4 };
        let k = random_f32_values(10, 3);
        let v = random_f32_values(10, 4);
        let bytes = encode_history(&l, &[k.clone()], &[v]).unwrap();
        assert_eq!(bytes.len(), l.record_bytes());
        let view = KvView::new(l, &bytes).unwrap();
        let mut dst = vec![0f32; 5];
        for g in 0..2 {
            view.key_into(0, g, &mut dst);
            let p = view.key_params(0, g);
            for j in 0..5 {
                assert!((dst[j] - k[g * 5 + j]).abs() <= p.scale / 2.0 + 1e-6);
            }
        }
    }

    #[test]
    fn threads_do_not_change_output() {
        let l = layout(2, 8);
        let keys: Vec<Vec<f32>> = (0..6).map(|t| random_f32_values(16, 10 + t)).collect();
        let vals: Vec<Vec<f32>> = (0..6).map(|t| random_f32_values(16, 20 + t)).collect();
        let bytes = encode_history(&l, &keys, &vals).unwrap();
        let view = KvView::new(l, &bytes).unwrap();
        let q = random_f32_values(4 * 3 * 8, 99);
        let one = attention_with_pool(&q, 4, 3, &view, true, &Pool::single()).unwrap();
        let pool = Pool::new(3, Some(&[1.0, 2.0, 1.0])).unwrap();
        assert_eq!(attention_with_pool(&q, 4, 3, &view, true, &pool).unwrap(), one);
    }

    proptest! {
        #[test]
        fn prescaling_matches_postscaling(seed in 0u64..10_000, d in 1usize..64, n in 1usize..32) {
            let q = random_f32_values(d, seed);
            let keys = random_f32_values(n * d, seed + 1);
            let inv = 1.0 / (d as f32).sqrt();
            let mut pre: Vec<f32> = (0..n)
                .map(|t| q.iter().zip(&keys[t * d..(t + 1) * d]).map(|(a, b)| (a * inv) * b).sum())
                .collect();
            let mut post: Vec<f32> = (0..n)
                .map(|t| q.iter().zip(&keys[t * d..(t + 1) * d]).map(|(a, b)| a * b).sum::<f32>() * inv)
                .collect();
            softmax_in_place(&mut pre);
            softmax_in_place(&mut post);
            for (a, b) in pre.iter().zip(&post) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            prop_assert!((pre.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }
}
