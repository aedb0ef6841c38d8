//! Dense F64 oracle for one decoder layer.
//!
//! Weights come in dequantized; the engine's own quantization points (int8
//! activations, int8 keys, fp8 values) are applied to the same tensors, so
//! what remains is accumulation-order and packing error.

use crate::quantize::{decode_values, encode_values, quant_activations_i8, quant_key, QuantBits};
use crate::runtime::engine::{apply_rope, rms_norm_rows, silu, Engine};
use crate::runtime::lora::LoraAdapter;
use crate::runtime::weights::Proj;

/// Dense F64 layer over the dequantized weights, with the engine's
/// quantization points (int8 activations, int8 keys, fp8 values)
/// applied to the same tensors.
pub fn reference_layer(e: &Engine, layer: usize, x: &[f32]) -> Vec<f64> {
    reference_layer_with(e, layer, x, &|p| e.dequantized(layer, p).iter().map(|&v| v as f64).collect())
}

pub fn reference_layer_with(e: &Engine, layer: usize, x: &[f32], weights: &dyn Fn(Proj) -> Vec<f64>) -> Vec<f64> {
    let cfg = e.config();
    let (h, d, heads, kvh) = (cfg.hidden_size, cfg.head_dim, cfg.n_heads, cfg.n_kv_heads);
    let kvd = kvh * d;
    let s = x.len() / h;
    let q_act = |v: &[f32]| -> Vec<f32> {
        v.chunks(v.len() / s)
            .flat_map(|row| {
                let (c, sc) = quant_activations_i8(row);
                c.into_iter().map(move |c| c as f32 * sc).collect::<Vec<_>>()
            })
            .collect()
    };
    let lin = |p: Proj, v: &[f32]| -> Vec<f32> {
        let w = weights(p);
        let xin = q_act(v);
        let inp = xin.len() / s;
        let out = w.len() / inp;
        let mut y = vec![0f32; s * out];
        for t in 0..s {
            for o in 0..out {
                let acc: f64 = (0..inp).map(|i| xin[t * inp + i] as f64 * w[o * inp + i]).sum();
                y[t * out + o] = acc as f32;
            }
        }
        y
    };
    let (an, fnorm) = e.norms(layer);
    let xn = rms_norm_rows(x, an, cfg.norm_eps);
    let mut q = lin(Proj::Q, &xn);
    let mut k = lin(Proj::K, &xn);
    let v = lin(Proj::V, &xn);
    apply_rope(&mut q, heads, d, 0, cfg.rope_theta);
    apply_rope(&mut k, kvh, d, 0, cfg.rope_theta);
    let mut kd = vec![0f64; s * kvd];
    let mut vd = vec![0f64; s * kvd];
    for t in 0..s {
        for g in 0..kvh {
            let span = t * kvd + g * d..t * kvd + (g + 1) * d;
            let (c, p) = quant_key(&k[span.clone()], QuantBits::Int8);
            for (i, c) in c.iter().enumerate() {
                kd[span.start + i] = p.dequant(*c as i32) as f64;
            }
            let vv = decode_values(&encode_values(&v[span.clone()]).unwrap());
            for (i, x) in vv.iter().enumerate() {
                vd[span.start + i] = *x as f64;
            }
        }
    }
    let mut att = vec![0f32; s * h];
    for hd in 0..heads {
        let g = hd / (heads / kvh);
        for i in 0..s {
            let qi = &q[i * h + hd * d..i * h + (hd + 1) * d];
            let scores: Vec<f64> = (0..=i)
                .map(|t| {
                    let kt = &kd[t * kvd + g * d..t * kvd + (g + 1) * d];
                    qi.iter().zip(kt).map(|(a, b)| *a as f64 * b).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..d {
                let acc: f64 =
                    (0..=i).map(|t| (scores[t] - m).exp() / z * vd[t * kvd + g * d + j]).sum();
                att[i * h + hd * d + j] = acc as f32;
            }
        }
    }
    let o = lin(Proj::O, &att);
    let x1: Vec<f32> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let xn2 = rms_norm_rows(&x1, fnorm, cfg.norm_eps);
    let gt = lin(Proj::Gate, &xn2);
    let up = lin(Proj::Up, &xn2);
    let act: Vec<f32> = gt.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    let down = lin(Proj::Down, &act);
    x1.iter().zip(&down).map(|(a, b)| (a + b) as f64).collect()
}

/// Dequantized base weight of `proj` in `layer` with `adapter` folded in:
/// `W + up * down`.
pub fn merged_weights(e: &Engine, adapter: &LoraAdapter, layer: usize, proj: Proj) -> Vec<f64> {
    let mut w: Vec<f64> = e.dequantized(layer, proj).iter().map(|&v| v as f64).collect();
    if let Some(pair) = adapter.entries.get(&(layer, proj)) {
        for o in 0..pair.outputs {
            for i in 0..pair.inputs {
                w[o * pair.inputs + i] += (0..adapter.rank)
                    .map(|r| pair.up[o * adapter.rank + r] as f64 * pair.down[r * pair.inputs + i] as f64)
                    .sum::<f64>();
            }
        }
    }
    w
}
