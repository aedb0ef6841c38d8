//! Tiled W4A8 / W8A8 GEMM over packed operands.
//!
//! For each `e_p x h_p` output tile the kernel walks the reduction axis one
//! `l_p` tile at a time, loading an `e_p x l_p` activation tile and an
//! `h_p x l_p` weight tile into local "registers". Integer products
//! accumulate in `i32` until a quantization block ends, then the
//! asymmetric correction
//!
//! ```text
//! a_scale * (scale * (sum(a*code) - clip_min * sum(a)) + w_min * sum(a))
//! ```
//!
//! is added to the `f32` accumulator. Blocks are visited in ascending `l`,
//! so every output element sees the same arithmetic regardless of tiling or
//! thread partition.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::kernels::pack::{PackedActivations, PackedWeights};
use crate::kernels::tiles::TileConfig;
use crate::scheduler::Pool;
use crate::tensor::Tensor;

/// Environment variable that enables element-access counting in the engine.
pub const ACCESS_COUNT_ENV: &str = "TF_COUNT_ACCESSES";

pub fn access_counting_enabled() -> bool {
    std::env::var(ACCESS_COUNT_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

fn check(a: &PackedActivations, w: &PackedWeights, t: &TileConfig) -> Result<()> {
    if a.cols() != w.cols() {
        return Err(Error::BadShape(format!(
            "activations have l={} but weights have l={}",
            a.cols(),
            w.cols()
        )));
    }
    if a.tile() != *t || w.tile() != *t {
        return Err(Error::BadLayout(format!(
            "operands packed with {} / {} but kernel asked for {t}",
            a.tile(),
            w.tile()
        )));
    }
    Ok(())
}

struct Scratch {
    a_reg: Vec<i8>,
    w_reg: Vec<i8>,
    iacc: Vec<i32>,
    facc: Vec<f32>,
}

impl Scratch {
    fn new(t: &TileConfig) -> Self {
        Self {
            a_reg: vec![0; t.e_p * t.l_p],
            w_reg: vec![0; t.h_p * t.l_p],
            iacc: vec![0; t.e_p * t.h_p],
            facc: vec![0.0; t.e_p * t.h_p],
        }
    }
}

/// Compute one `e_p x h_p` macro tile into `scratch.facc`; returns element
/// loads + stores performed.
fn macro_tile(
    a: &PackedActivations,
    w: &PackedWeights,
    block_sums: &[i32],
    row_tile: usize,
    col_tile: usize,
    s: &mut Scratch,
) -> u64 {
    let t = a.tile();
    let (ep, hp, lp) = (t.e_p, t.h_p, t.l_p);
    let l = a.cols();
    let bs = w.block_size();
    let n_blocks = l / bs;
    let seg = w.segment();
    let nseg = w.segments_per_tile();
    let mut accesses = 0u64;
    s.iacc.fill(0);
    s.facc.fill(0.0);
    for kt in 0..a.col_tiles() {
        s.a_reg.copy_from_slice(a.tile_slice(row_tile, kt));
        w.load_tile(col_tile, kt, &mut s.w_reg);
        accesses += (ep * lp + hp * lp) as u64;
        for sg in 0..nseg {
            let k0 = kt * lp + sg * seg;
            if k0 >= l {
                break;
            }
            let span = sg * seg..(sg + 1) * seg;
            for ii in 0..ep {
                let arow = &s.a_reg[ii * lp..(ii + 1) * lp][span.clone()];
                for jj in 0..hp {
                    let wrow = &s.w_reg[jj * lp..(jj + 1) * lp][span.clone()];
                    let dot: i32 = arow.iter().zip(wrow).map(|(&x, &y)| x as i32 * y as i32).sum();
                    s.iacc[ii * hp + jj] += dot;
                }
            }
            let k_end = k0 + seg;
            if k_end % bs == 0 || k_end >= l {
                let block = (k_end - 1) / bs;
                for ii in 0..ep {
                    let row = row_tile * ep + ii;
                    if row >= a.rows() {
                        break;
                    }
                    let asum = block_sums[row * n_blocks + block];
                    let a_scale = a.scales()[row];
                    for jj in 0..hp {
                        let p = w.tile_params(col_tile, kt, jj, sg);
                        let slot = ii * hp + jj;
                        let centered = s.iacc[slot] - p.clip_min * asum;
                        s.facc[slot] += a_scale * (p.scale * centered as f32 + p.w_min * asum as f32);
                        s.iacc[slot] = 0;
                    }
                }
            }
        }
    }
    accesses + (ep * hp) as u64
}

fn run_tiles(
    a: &PackedActivations,
    w: &PackedWeights,
    block_sums: &[i32],
    row_tiles: Range<usize>,
    col_tiles: Range<usize>,
    out: &mut [f32],
    out_row0: usize,
    out_col0: usize,
    out_stride: usize,
) -> u64 {
    let t = a.tile();
    let mut scratch = Scratch::new(&t);
    let mut accesses = 0;
    for rt in row_tiles {
        for ct in col_tiles.clone() {
            accesses += macro_tile(a, w, block_sums, rt, ct, &mut scratch);
            for ii in 0..t.e_p {
                let i = rt * t.e_p + ii;
                if i >= a.rows() {
                    break;
                }
                for jj in 0..t.h_p {
                    let j = ct * t.h_p + jj;
                    if j >= w.rows() {
                        break;
                    }
                    out[(i - out_row0) * out_stride + (j - out_col0)] = scratch.facc[ii * t.h_p + jj];
                }
            }
        }
    }
    accesses
}

/// `out[e, h] = A[e, l] * dequant(W[h, l])^T`, written into `out`.
///
/// Decode-shaped calls (`e == 1`) split output columns by `h_p` tiles across
/// the pool; larger `e` splits by `e_p` tiles. Returns the number of element
/// loads and stores the tiled kernel performed.
pub fn gemm_q_into(
    a: &PackedActivations,
    w: &PackedWeights,
    t: &TileConfig,
    pool: &Pool,
    out: &mut [f32],
) -> Result<u64> {
    check(a, w, t)?;
    let (e, h) = (a.rows(), w.rows());
    if out.len() != e * h {
        return Err(Error::BadShape(format!("output holds {} values, need {}", out.len(), e * h)));
    }
    let block_sums = a.block_sums(w.block_size());
    let totals = std::sync::Mutex::new(0u64);
    if e == 1 {
        let tiles = pool.partition(w.row_tiles());
        let cols: Vec<Range<usize>> = tiles
            .iter()
            .map(|r| (r.start * t.h_p).min(h)..(r.end * t.h_p).min(h))
            .collect();
        pool.parallel_chunks(out, &cols, |worker, col_range, chunk| {
            let n = run_tiles(a, w, &block_sums, 0..1, tiles[worker].clone(), chunk, 0, col_range.start, chunk.len());
            *totals.lock().unwrap() += n;
        });
    } else {
        let tiles = pool.partition(a.row_tiles());
        let rows: Vec<Range<usize>> = tiles
            .iter()
            .map(|r| (r.start * t.e_p).min(e) * h..(r.end * t.e_p).min(e) * h)
            .collect();
        pool.parallel_chunks(out, &rows, |worker, elems, chunk| {
            let row0 = elems.start / h;
            let n = run_tiles(a, w, &block_sums, tiles[worker].clone(), 0..w.row_tiles(), chunk, row0, 0, h);
            *totals.lock().unwrap() += n;
        });
    }
    Ok(totals.into_inner().unwrap())
}

/// Single-threaded tiled GEMM returning a `[e, h]` F32 tensor.
pub fn gemm_q(a: &PackedActivations, w: &PackedWeights, t: &TileConfig) -> Result<Tensor> {
    gemm_q_counted(a, w, t).map(|(out, _)| out)
}

/// [`gemm_q`] plus the measured element-access count.
pub fn gemm_q_counted(a: &PackedActivations, w: &PackedWeights, t: &TileConfig) -> Result<(Tensor, u64)> {
    let mut out = vec![0f32; a.rows() * w.rows()];
    let n = gemm_q_into(a, w, t, &Pool::single(), &mut out)?;
    Ok((Tensor::from_f32(vec![a.rows(), w.rows()], &out)?, n))
}
