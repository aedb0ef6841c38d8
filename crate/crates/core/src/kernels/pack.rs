//! Tile-major packing of activations and weights.
//!
//! Activations `[e, l]` become `[ceil(e/e_p), ceil(l/l_p), e_p, l_p]` and
//! weights `[h, l]` become `[ceil(h/h_p), ceil(l/l_p), h_p, l_p]`. Tails are
//! zero-padded so the kernel never branches on edges. Weight block
//! parameters are stored next to the tile they describe.

use crate::error::{Error, Result};
use crate::kernels::tiles::TileConfig;
use crate::quantize::{quant_activations_i8, QTensor, QuantBits, QuantParams};

#[inline]
fn tile_offset(row: usize, col: usize, n_col_tiles: usize, rows_p: usize, l_p: usize) -> usize {
    let (br, bc) = (row / rows_p, col / l_p);
    ((br * n_col_tiles + bc) * rows_p + row % rows_p) * l_p + col % l_p
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedActivations {
    e: usize,
    l: usize,
    tile: TileConfig,
    codes: Vec<i8>,
    scales: Vec<f32>,
}

impl PackedActivations {
    pub fn rows(&self) -> usize {
        self.e
    }

    pub fn cols(&self) -> usize {
        self.l
    }

    pub fn tile(&self) -> TileConfig {
        self.tile
    }

    pub fn row_tiles(&self) -> usize {
        self.e.div_ceil(self.tile.e_p)
    }

    pub fn col_tiles(&self) -> usize {
        self.l.div_ceil(self.tile.l_p)
    }

    pub fn packed(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// The `e_p x l_p` tile at `(row_tile, col_tile)`.
    #[inline]
    pub fn tile_slice(&self, row_tile: usize, col_tile: usize) -> &[i8] {
        let size = self.tile.e_p * self.tile.l_p;
        let start = (row_tile * self.col_tiles() + col_tile) * size;
        &self.codes[start..start + size]
    }

    pub fn code(&self, row: usize, col: usize) -> i8 {
        self.codes[tile_offset(row, col, self.col_tiles(), self.tile.e_p, self.tile.l_p)]
    }

    /// Row-major `[e, l]` codes.
    pub fn unpack(&self) -> Vec<i8> {
        let mut out = Vec::with_capacity(self.e * self.l);
        for i in 0..self.e {
            for k in 0..self.l {
                out.push(self.code(i, k));
            }
        }
        out
    }

    /// Dequantized row-major activations `code * row_scale`.
    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.e * self.l);
        for i in 0..self.e {
            for k in 0..self.l {
                out.push(self.code(i, k) as f32 * self.scales[i]);
            }
        }
        out
    }

    /// Per-row sums of codes over each `block`-wide span of `l`.
    pub fn block_sums(&self, block: usize) -> Vec<i32> {
        let n_blocks = self.l.div_ceil(block);
        let mut sums = vec![0i32; self.e * n_blocks];
        for i in 0..self.e {
            for k in 0..self.l {
                sums[i * n_blocks + k / block] += self.code(i, k) as i32;
            }
        }
        sums
    }
}

pub fn pack_activations(
    codes: &[i8],
    scales: &[f32],
    e: usize,
    l: usize,
    tile: TileConfig,
) -> Result<PackedActivations> {
    if e == 0 || l == 0 || codes.len() != e * l || scales.len() != e {
        return Err(Error::BadShape(format!(
            "{} codes / {} scales for [{e}, {l}]",
            codes.len(),
            scales.len()
        )));
    }
    let n_col_tiles = l.div_ceil(tile.l_p);
    let mut packed = vec![0i8; e.div_ceil(tile.e_p) * tile.e_p * n_col_tiles * tile.l_p];
    for i in 0..e {
        for k in 0..l {
            packed[tile_offset(i, k, n_col_tiles, tile.e_p, tile.l_p)] = codes[i * l + k];
        }
    }
    Ok(PackedActivations { e, l, tile, codes: packed, scales: scales.to_vec() })
}

/// Quantize each row of `x` (`[e, l]`, row-major) to int8 and pack it.
pub fn quantize_and_pack(x: &[f32], e: usize, l: usize, tile: TileConfig) -> Result<PackedActivations> {
    if x.len() != e * l || e == 0 || l == 0 {
        return Err(Error::BadShape(format!("{} values for [{e}, {l}]", x.len())));
    }
    let mut codes = Vec::with_capacity(e * l);
    let mut scales = Vec::with_capacity(e);
    for row in x.chunks_exact(l) {
        let (c, s) = quant_activations_i8(row);
        codes.extend_from_slice(&c);
        scales.push(s);
    }
    pack_activations(&codes, &scales, e, l, tile)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights {
    h: usize,
    l: usize,
    tile: TileConfig,
    bits: QuantBits,
    block_size: usize,
    /// Tile-major codes; 4-bit codes packed two per byte, low nibble first.
    codes: Vec<u8>,
    /// `[h tiles][l tiles][h_p][segments per tile]`.
    params: Vec<QuantParams>,
}

impl PackedWeights {
    pub fn rows(&self) -> usize {
        self.h
    }

    pub fn cols(&self) -> usize {
        self.l
    }

    pub fn tile(&self) -> TileConfig {
        self.tile
    }

    pub fn bits(&self) -> QuantBits {
        self.bits
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn row_tiles(&self) -> usize {
        self.h.div_ceil(self.tile.h_p)
    }

    pub fn col_tiles(&self) -> usize {
        self.l.div_ceil(self.tile.l_p)
    }

    /// Reduction segment length: one quantization block or one `l_p` tile,
    /// whichever is shorter.
    pub fn segment(&self) -> usize {
        self.block_size.min(self.tile.l_p)
    }

    pub fn segments_per_tile(&self) -> usize {
        self.tile.l_p / self.segment()
    }

    /// Bytes of codes plus `(scale, w_min)` pairs.
    pub fn storage_bytes(&self) -> usize {
        self.codes.len() + self.params.len() * 8
    }

    #[inline]
    fn code_at(&self, flat: usize) -> i8 {
        match self.bits {
            QuantBits::Int8 => self.codes[flat] as i8,
            QuantBits::Int4 => {
                let byte = self.codes[flat / 2];
                let nib = if flat % 2 == 0 { byte & 0x0F } else { byte >> 4 };
                ((nib << 4) as i8) >> 4
            }
        }
    }

    /// Decode the `h_p x l_p` tile at `(row_tile, col_tile)` into `dst`.
    #[inline]
    pub fn load_tile(&self, row_tile: usize, col_tile: usize, dst: &mut [i8]) {
        let size = self.tile.h_p * self.tile.l_p;
        let start = (row_tile * self.col_tiles() + col_tile) * size;
        match self.bits {
            QuantBits::Int8 => {
                for (d, &c) in dst.iter_mut().zip(&self.codes[start..start + size]) {
                    *d = c as i8;
                }
            }
            QuantBits::Int4 => {
                for (i, d) in dst.iter_mut().enumerate().take(size) {
                    *d = self.code_at(start + i);
                }
            }
        }
    }

    /// Parameters of row `jj` within tile `(row_tile, col_tile)`, segment `s`.
    #[inline]
    pub fn tile_params(&self, row_tile: usize, col_tile: usize, jj: usize, s: usize) -> &QuantParams {
        let nseg = self.segments_per_tile();
        &self.params[((row_tile * self.col_tiles() + col_tile) * self.tile.h_p + jj) * nseg + s]
    }

    pub fn code(&self, row: usize, col: usize) -> i8 {
        self.code_at(tile_offset(row, col, self.col_tiles(), self.tile.h_p, self.tile.l_p))
    }

    pub fn params_for(&self, row: usize, col: usize) -> &QuantParams {
        let (bt, ct) = (row / self.tile.h_p, col / self.tile.l_p);
        let s = (col % self.tile.l_p) / self.segment();
        self.tile_params(bt, ct, row % self.tile.h_p, s)
    }

    /// Row-major `[h, l]` codes.
    pub fn unpack(&self) -> Vec<i8> {
        let mut out = Vec::with_capacity(self.h * self.l);
        for j in 0..self.h {
            for k in 0..self.l {
                out.push(self.code(j, k));
            }
        }
        out
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.h * self.l);
        for j in 0..self.h {
            for k in 0..self.l {
                out.push(self.params_for(j, k).dequant(self.code(j, k) as i32));
            }
        }
        out
    }
}

pub fn pack_weights(w: &QTensor, tile: TileConfig) -> Result<PackedWeights> {
    let bs = w.block_size();
    if bs % tile.l_p != 0 && tile.l_p % bs != 0 {
        return Err(Error::BadLayout(format!(
            "block size {bs} and l_p {} do not nest",
            tile.l_p
        )));
    }
    let (h, l) = (w.rows(), w.cols());
    let n_row_tiles = h.div_ceil(tile.h_p);
    let n_col_tiles = l.div_ceil(tile.l_p);
    let n = n_row_tiles * tile.h_p * n_col_tiles * tile.l_p;
    let mut flat = vec![0i8; n];
    // padding must decode to zero: zero codes under zero-scale params
    for j in 0..h {
        for k in 0..l {
            flat[tile_offset(j, k, n_col_tiles, tile.h_p, tile.l_p)] = w.code(j, k);
        }
    }
    let codes = match w.bits() {
        QuantBits::Int8 => flat.iter().map(|&c| c as u8).collect(),
        QuantBits::Int4 => flat
            .chunks(2)
            .map(|p| (p[0] as u8 & 0x0F) | (p.get(1).map_or(0, |&c| c as u8 & 0x0F) << 4))
            .collect(),
    };
    let seg = bs.min(tile.l_p);
    let nseg = tile.l_p / seg;
    let n_blocks = w.blocks_per_row();
    let mut params = Vec::with_capacity(n_row_tiles * n_col_tiles * tile.h_p * nseg);
    for bt in 0..n_row_tiles {
        for ct in 0..n_col_tiles {
            for jj in 0..tile.h_p {
                for s in 0..nseg {
                    let row = bt * tile.h_p + jj;
                    let block = (ct * tile.l_p + s * seg) / bs;
                    params.push(if row < h && block < n_blocks {
                        *w.block_params(row, block)
                    } else {
                        QuantParams::zero(w.bits())
                    });
                }
            }
        }
    }
    Ok(PackedWeights { h, l, tile, bits: w.bits(), block_size: bs, codes, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::quantize_matrix;
    use crate::tensor::random_f32_values;
    use proptest::prelude::*;

    fn random_codes(n: usize, seed: u64) -> Vec<i8> {
        random_f32_values(n, seed).iter().map(|v| (v * 127.0) as i8).collect()
    }

    #[test]
    fn single_element() {
        let t = TileConfig { e_p: 12, h_p: 8, l_p: 4 };
        let p = pack_activations(&[5], &[1.0], 1, 1, t).unwrap();
        assert_eq!(p.packed().len(), 12 * 4);
        assert_eq!(p.packed()[0], 5);
        assert!(p.packed()[1..].iter().all(|&c| c == 0));
        assert_eq!(p.unpack(), vec![5]);
    }

    #[test]
    fn two_blocks_along_e() {
        let t = TileConfig { e_p: 1, h_p: 1, l_p: 4 };
        let codes = [1, 2, 3, 4, 5, 6, 7, 8];
        let p = pack_activations(&codes, &[1.0, 1.0], 2, 4, t).unwrap();
        assert_eq!(p.row_tiles(), 2);
        assert_eq!(p.tile_slice(0, 0), &[1, 2, 3, 4]);
        assert_eq!(p.tile_slice(1, 0), &[5, 6, 7, 8]);
    }

    #[test]
    fn index_rule() {
        let t = TileConfig { e_p: 3, h_p: 2, l_p: 4 };
        let (e, l) = (7, 10);
        let codes: Vec<i8> = (0..(e * l) as i32).map(|v| (v % 100) as i8).collect();
        let p = pack_activations(&codes, &vec![1.0; e], e, l, t).unwrap();
        let ct = l.div_ceil(4);
        for i in 0..e {
            for k in 0..l {
                let idx = (((i / 3) * ct + k / 4) * 3 + i % 3) * 4 + k % 4;
                assert_eq!(p.packed()[idx], codes[i * l + k]);
            }
        }
    }

    #[test]
    fn random_24x8_identity() {
        let t = TileConfig { e_p: 12, h_p: 8, l_p: 4 };
        let codes = random_codes(24 * 8, 3);
        let p = pack_activations(&codes, &[1.0; 24], 24, 8, t).unwrap();
        assert_eq!(p.unpack(), codes);
        assert_eq!(p.packed().len(), 24 * 8);
    }

    #[test]
    fn weights_single_and_layout_errors() {
        let q = quantize_matrix(&[0.5], 1, 1, QuantBits::Int8, 1).unwrap();
        let t = TileConfig { e_p: 12, h_p: 8, l_p: 4 };
        let pw = pack_weights(&q, t).unwrap();
        assert_eq!(pw.unpack(), vec![q.code(0, 0)]);
        assert_eq!(pw.dequantize(), q.dequantize());

        let q = quantize_matrix(&random_f32_values(2 * 12, 1), 2, 12, QuantBits::Int8, 12).unwrap();
        let t = TileConfig { e_p: 1, h_p: 1, l_p: 8 };
        assert_eq!(pack_weights(&q, t).unwrap_err().code(), "bad-layout");
    }

    #[test]
    fn padding_decodes_to_zero() {
        let q = quantize_matrix(&random_f32_values(3 * 8, 2), 3, 8, QuantBits::Int4, 4).unwrap();
        let t = TileConfig { e_p: 1, h_p: 2, l_p: 8 };
        let pw = pack_weights(&q, t).unwrap();
        // row 3 is padding in the second row tile
        let p = pw.tile_params(1, 0, 1, 0);
        assert_eq!(p.dequant(0), 0.0);
    }

    proptest! {
        #[test]
        fn activation_pack_bijective(e in 1usize..40, l in 1usize..40, ep in 1usize..13, lp in 1usize..9, seed in 0u64..1000) {
            let t = TileConfig { e_p: ep, h_p: 1, l_p: lp };
            let codes = random_codes(e * l, seed);
            let p = pack_activations(&codes, &vec![1.0; e], e, l, t).unwrap();
            prop_assert_eq!(p.unpack(), codes);
            let nonzero_packed = p.packed().iter().filter(|&&c| c != 0).count();
            let nonzero_src = p.unpack().iter().filter(|&&c| c != 0).count();
            prop_assert_eq!(nonzero_packed, nonzero_src);
        }

        #[test]
        fn weight_pack_bijective(h in 1usize..30, blocks in 1usize..5, hp in 1usize..9, lp_pow in 0u32..4, bs_pow in 0u32..4, four in any::<bool>(), seed in 0u64..1000) {
            let lp = 1usize << lp_pow;
            let bs = 1usize << bs_pow;
            let l = bs * blocks;
            let bits = if four { QuantBits::Int4 } else { QuantBits::Int8 };
            let q = quantize_matrix(&random_f32_values(h * l, seed), h, l, bits, bs).unwrap();
            let pw = pack_weights(&q, TileConfig { e_p: 1, h_p: hp, l_p: lp }).unwrap();
            let expect: Vec<i8> = (0..h).flat_map(|j| (0..l).map(move |k| (j, k))).map(|(j, k)| q.code(j, k)).collect();
            prop_assert_eq!(pw.unpack(), expect);
            prop_assert_eq!(pw.dequantize(), q.dequantize());
        }
    }
}
