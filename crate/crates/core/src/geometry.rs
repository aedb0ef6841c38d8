//! Data rearrangement as affine address maps.
//!
//! A [`Region`] copies `size[0] x size[1] x size[2]` elements, reading
//! `src_offset + i*src_stride[0] + j*src_stride[1] + k*src_stride[2]` and
//! writing the same index through the destination map. Transpose, slice,
//! concat and gather lower to one or more Regions; [`fuse_regions`] composes
//! a producer/consumer pair of Region lists into direct source-to-destination
//! Regions when the maps compose affinely.
//!
//! Operators with several inputs (concat) read from one source buffer that
//! holds the inputs back to back, in order.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Region {
    pub size: [usize; 3],
    pub src_offset: usize,
    pub src_stride: [usize; 3],
    pub dst_offset: usize,
    pub dst_stride: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dim {
    size: usize,
    src: usize,
    dst: usize,
}

impl Region {
    pub fn flat_copy(len: usize, src_offset: usize, dst_offset: usize) -> Self {
        Region {
            size: [len, 1, 1],
            src_offset,
            src_stride: [1, 0, 0],
            dst_offset,
            dst_stride: [1, 0, 0],
        }
    }

    pub fn volume(&self) -> usize {
        self.size.iter().product()
    }

    pub fn is_flat_copy(&self) -> bool {
        self.size[1] == 1 && self.size[2] == 1 && self.src_stride[0] == 1 && self.dst_stride[0] == 1
    }

    /// One past the highest source address touched (0 for an empty Region).
    pub fn src_end(&self) -> usize {
        end_address(self.size, self.src_offset, self.src_stride)
    }

    pub fn dst_end(&self) -> usize {
        end_address(self.size, self.dst_offset, self.dst_stride)
    }

    fn dims(&self) -> Vec<Dim> {
        (0..3)
            .map(|a| Dim { size: self.size[a], src: self.src_stride[a], dst: self.dst_stride[a] })
            .collect()
    }

    /// Canonical form: unit extents dropped, loops ordered by descending
    /// source stride, contiguous neighbours merged.
    pub fn simplified(&self) -> Region {
        let mut out = regions_from_dims(self.dims(), self.src_offset, self.dst_offset);
        debug_assert_eq!(out.len(), 1);
        out.pop().unwrap_or(*self)
    }

    /// Addresses `(src, dst)` for every element in loop order.
    pub fn addresses(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let [s0, s1, s2] = self.size;
        (0..s0).flat_map(move |i| {
            (0..s1).flat_map(move |j| {
                (0..s2).map(move |k| {
                    (
                        self.src_offset + i * self.src_stride[0] + j * self.src_stride[1] + k * self.src_stride[2],
                        self.dst_offset + i * self.dst_stride[0] + j * self.dst_stride[1] + k * self.dst_stride[2],
                    )
                })
            })
        })
    }
}

fn end_address(size: [usize; 3], offset: usize, stride: [usize; 3]) -> usize {
    if size.contains(&0) {
        return 0;
    }
    offset + (0..3).map(|a| (size[a] - 1) * stride[a]).sum::<usize>() + 1
}

fn canonical_dims(dims: Vec<Dim>) -> Vec<Dim> {
    let mut dims: Vec<Dim> = dims.into_iter().filter(|d| d.size != 1).collect();
    // loop interchange is legal: a Region never writes one address twice
    dims.sort_by(|a, b| b.src.cmp(&a.src).then(b.dst.cmp(&a.dst)));
    let mut merged: Vec<Dim> = Vec::with_capacity(dims.len());
    for d in dims {
        if let Some(outer) = merged.last_mut() {
            if outer.src == d.src * d.size && outer.dst == d.dst * d.size {
                outer.size *= d.size;
                outer.src = d.src;
                outer.dst = d.dst;
                continue;
            }
        }
        merged.push(d);
    }
    merged
}

/// Lower an arbitrary-rank affine copy to Regions, unrolling outer loops
/// when more than three remain after simplification.
fn regions_from_dims(dims: Vec<Dim>, src_offset: usize, dst_offset: usize) -> Vec<Region> {
    if dims.iter().any(|d| d.size == 0) {
        return Vec::new();
    }
    let dims = canonical_dims(dims);
    let split = dims.len().saturating_sub(3);
    let (outer, inner) = dims.split_at(split);
    let mut size = [1usize; 3];
    let mut src_stride = [0usize; 3];
    let mut dst_stride = [0usize; 3];
    for (a, d) in inner.iter().enumerate() {
        size[a] = d.size;
        src_stride[a] = d.src;
        dst_stride[a] = d.dst;
    }
    if dims.is_empty() {
        return vec![Region::flat_copy(1, src_offset, dst_offset)];
    }
    let mut out = Vec::new();
    let mut idx = vec![0usize; outer.len()];
    loop {
        let so = src_offset + outer.iter().zip(&idx).map(|(d, i)| d.src * i).sum::<usize>();
        let dof = dst_offset + outer.iter().zip(&idx).map(|(d, i)| d.dst * i).sum::<usize>();
        out.push(Region { size, src_offset: so, src_stride, dst_offset: dof, dst_stride });
        let mut a = outer.len();
        loop {
            if a == 0 {
                return out;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < outer[a].size {
                break;
            }
            idx[a] = 0;
        }
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    strides
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::BadShape(format!("invalid shape {shape:?}")));
    }
    Ok(())
}

/// `dst = src.permute(perm)`: destination axis `a` is source axis `perm[a]`.
pub fn region_for_transpose(shape: &[usize], perm: &[usize]) -> Result<Vec<Region>> {
    check_shape(shape)?;
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::BadPerm(format!("{perm:?} is not a permutation of {rank} axes")));
    }
    let src_strides = row_major_strides(shape);
    let dst_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let dst_strides = row_major_strides(&dst_shape);
    let mut dst_for_src = vec![0usize; rank];
    for (a, &p) in perm.iter().enumerate() {
        dst_for_src[p] = dst_strides[a];
    }
    let dims = (0..rank)
        .map(|ax| Dim { size: shape[ax], src: src_strides[ax], dst: dst_for_src[ax] })
        .collect();
    Ok(regions_from_dims(dims, 0, 0))
}

/// Concatenate inputs (stored back to back in the source) along `axis`.
/// Emits one Region per input.
pub fn region_for_concat(shapes: &[Vec<usize>], axis: usize) -> Result<Vec<Region>> {
    let first = shapes.first().ok_or_else(|| Error::BadShape("concat needs an input".into()))?;
    for s in shapes {
        check_shape(s)?;
    }
    let rank = first.len();
    if axis >= rank {
        return Err(Error::BadRange(format!("axis {axis} out of range for rank {rank}")));
    }
    for s in shapes {
        if s.len() != rank || (0..rank).any(|a| a != axis && s[a] != first[a]) {
            return Err(Error::BadShape(format!("{s:?} cannot be concatenated with {first:?} on axis {axis}")));
        }
    }
    let mut out_shape = first.clone();
    out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
    let dst_strides = row_major_strides(&out_shape);
    let mut regions = Vec::new();
    let (mut src_offset, mut axis_offset) = (0usize, 0usize);
    for s in shapes {
        let src_strides = row_major_strides(s);
        let dims = (0..rank)
            .map(|a| Dim { size: s[a], src: src_strides[a], dst: dst_strides[a] })
            .collect();
        regions.extend(regions_from_dims(dims, src_offset, axis_offset * dst_strides[axis]));
        src_offset += s.iter().product::<usize>();
        axis_offset += s[axis];
    }
    Ok(regions)
}

/// Copy the box `begin .. begin + size` of a row-major tensor into a dense output.
pub fn region_for_slice(shape: &[usize], begin: &[usize], size: &[usize]) -> Result<Vec<Region>> {
    check_shape(shape)?;
    let rank = shape.len();
    if begin.len() != rank || size.len() != rank {
        return Err(Error::BadRange(format!("begin/size rank differs from {rank}")));
    }
    if (0..rank).any(|a| size[a] == 0 || begin[a] + size[a] > shape[a]) {
        return Err(Error::BadRange(format!("slice {begin:?}+{size:?} outside {shape:?}")));
    }
    let src_strides = row_major_strides(shape);
    let dst_strides = row_major_strides(size);
    let src_offset = (0..rank).map(|a| begin[a] * src_strides[a]).sum();
    let dims = (0..rank)
        .map(|a| Dim { size: size[a], src: src_strides[a], dst: dst_strides[a] })
        .collect();
    Ok(regions_from_dims(dims, src_offset, 0))
}

/// Gather rows (axis 0) by index. Runs of consecutive indices share a Region.
pub fn region_for_gather(shape: &[usize], indices: &[usize]) -> Result<Vec<Region>> {
    check_shape(shape)?;
    if indices.is_empty() {
        return Err(Error::BadRange("gather needs at least one index".into()));
    }
    if let Some(i) = indices.iter().find(|&&i| i >= shape[0]) {
        return Err(Error::BadRange(format!("index {i} outside axis of {}", shape[0])));
    }
    let row: usize = shape[1..].iter().product();
    let mut regions = Vec::new();
    let mut t = 0;
    while t < indices.len() {
        let mut run = 1;
        while t + run < indices.len() && indices[t + run] == indices[t] + run {
            run += 1;
        }
        let dims = vec![Dim { size: run * row, src: 1, dst: 1 }];
        regions.extend(regions_from_dims(dims, indices[t] * row, t * row));
        t += run;
    }
    Ok(regions)
}

/// Total element moves performed by a Region list.
pub fn element_moves(regions: &[Region]) -> usize {
    regions.iter().map(Region::volume).sum()
}

/// Execute `regions`, copying `elem_size`-byte elements from `src` to `dst`.
/// Bytes of `dst` not covered by any Region are left untouched.
pub fn apply_regions(src: &[u8], regions: &[Region], dst: &mut [u8], elem_size: usize) -> Result<()> {
    if elem_size == 0 {
        return Err(Error::BadArg("element size must be positive".into()));
    }
    for r in regions {
        if r.src_end() * elem_size > src.len() || r.dst_end() * elem_size > dst.len() {
            return Err(Error::RegionOob(format!(
                "{r:?} needs src {} / dst {} bytes, buffers hold {} / {}",
                r.src_end() * elem_size,
                r.dst_end() * elem_size,
                src.len(),
                dst.len()
            )));
        }
    }
    for r in regions {
        if r.size[2] > 1 && r.src_stride[2] == 1 && r.dst_stride[2] == 1 {
            let run = r.size[2] * elem_size;
            for i in 0..r.size[0] {
                for j in 0..r.size[1] {
                    let s = (r.src_offset + i * r.src_stride[0] + j * r.src_stride[1]) * elem_size;
                    let d = (r.dst_offset + i * r.dst_stride[0] + j * r.dst_stride[1]) * elem_size;
                    dst[d..d + run].copy_from_slice(&src[s..s + run]);
                }
            }
        } else if r.is_flat_copy() {
            let s = r.src_offset * elem_size;
            let d = r.dst_offset * elem_size;
            let run = r.size[0] * elem_size;
            dst[d..d + run].copy_from_slice(&src[s..s + run]);
        } else {
            for (s, d) in r.addresses() {
                dst[d * elem_size..(d + 1) * elem_size]
                    .copy_from_slice(&src[s * elem_size..(s + 1) * elem_size]);
            }
        }
    }
    Ok(())
}

/// [`apply_regions`] over typed elements instead of raw bytes.
pub fn apply_regions_typed<T: Copy>(src: &[T], regions: &[Region], dst: &mut [T]) -> Result<()> {
    for r in regions {
        if r.src_end() > src.len() || r.dst_end() > dst.len() {
            return Err(Error::RegionOob(format!(
                "{r:?} outside buffers of {} / {} elements",
                src.len(),
                dst.len()
            )));
        }
    }
    for r in regions {
        if r.is_flat_copy() {
            let (s, d, n) = (r.src_offset, r.dst_offset, r.size[0]);
            dst[d..d + n].copy_from_slice(&src[s..s + n]);
        } else if r.size[2] > 1 && r.src_stride[2] == 1 && r.dst_stride[2] == 1 {
            let run = r.size[2];
            for i in 0..r.size[0] {
                for j in 0..r.size[1] {
                    let s = r.src_offset + i * r.src_stride[0] + j * r.src_stride[1];
                    let d = r.dst_offset + i * r.dst_stride[0] + j * r.dst_stride[1];
                    dst[d..d + run].copy_from_slice(&src[s..s + run]);
                }
            }
        } else {
            for (s, d) in r.addresses() {
                dst[d] = src[s];
            }
        }
    }
    Ok(())
}

/// Two rearrangements back to back: `producer` writes an intermediate
/// buffer of `intermediate_len` elements that `consumer` reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionChain {
    pub producer: Vec<Region>,
    pub consumer: Vec<Region>,
    pub intermediate_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fused {
    /// Source-to-destination Regions; the intermediate buffer is gone.
    Direct(Vec<Region>),
    /// Not composable; the chain is returned as given.
    Chain(RegionChain),
}

impl Fused {
    pub fn region_count(&self) -> usize {
        match self {
            Fused::Direct(r) => r.len(),
            Fused::Chain(c) => c.producer.len() + c.consumer.len(),
        }
    }

    pub fn element_moves(&self) -> usize {
        match self {
            Fused::Direct(r) => element_moves(r),
            Fused::Chain(c) => element_moves(&c.producer) + element_moves(&c.consumer),
        }
    }

    pub fn execute(&self, src: &[u8], dst: &mut [u8], elem_size: usize) -> Result<()> {
        match self {
            Fused::Direct(r) => apply_regions(src, r, dst, elem_size),
            Fused::Chain(c) => c.execute(src, dst, elem_size),
        }
    }
}

impl RegionChain {
    /// Two-pass execution through a zero-initialized intermediate buffer.
    pub fn execute(&self, src: &[u8], dst: &mut [u8], elem_size: usize) -> Result<()> {
        let mut mid = vec![0u8; self.intermediate_len * elem_size];
        apply_regions(src, &self.producer, &mut mid, elem_size)?;
        apply_regions(&mid, &self.consumer, dst, elem_size)
    }
}

/// Greedy mixed-radix digits of `value` over `dims` (sorted by descending
/// destination stride). `None` if `value` is not an address of the map.
fn digits(value: usize, dims: &[Dim]) -> Option<Vec<usize>> {
    let mut rest = value;
    let mut out = Vec::with_capacity(dims.len());
    for d in dims {
        let q = rest / d.dst;
        if q >= d.size {
            return None;
        }
        rest -= q * d.dst;
        out.push(q);
    }
    (rest == 0).then_some(out)
}

/// Compose `b` (reading the intermediate) with `a` (writing it) into a
/// single Region reading the original source, if `b` only reads addresses
/// `a` writes and the combined map stays affine (no digit carries).
fn compose_pair(a: &Region, b: &Region) -> Option<Region> {
    let mut adims: Vec<Dim> = a.dims().into_iter().filter(|d| d.size > 1).collect();
    adims.sort_by(|x, y| y.dst.cmp(&x.dst));
    for w in adims.windows(2) {
        if w[0].dst < w[1].dst * w[1].size {
            return None;
        }
    }
    let base = digits(b.src_offset.checked_sub(a.dst_offset)?, &adims)?;
    let mut reach = base.clone();
    let mut src_stride = [0usize; 3];
    for j in 0..3 {
        if b.size[j] <= 1 {
            continue;
        }
        let c = digits(b.src_stride[j], &adims)?;
        for k in 0..adims.len() {
            reach[k] += (b.size[j] - 1) * c[k];
            if reach[k] >= adims[k].size {
                return None;
            }
        }
        src_stride[j] = c.iter().zip(&adims).map(|(ck, d)| ck * d.src).sum();
    }
    let src_offset = a.src_offset + base.iter().zip(&adims).map(|(y, d)| y * d.src).sum::<usize>();
    Some(
        Region { size: b.size, src_offset, src_stride, dst_offset: b.dst_offset, dst_stride: b.dst_stride }
            .simplified(),
    )
}

/// `b` restricted to indices `start..end` of its outermost non-unit loop.
fn sub_region(b: &Region, axis: usize, start: usize, end: usize) -> Region {
    let mut r = *b;
    r.size[axis] = end - start;
    r.src_offset += start * b.src_stride[axis];
    r.dst_offset += start * b.dst_stride[axis];
    r
}

fn compose_any(producer: &[Region], b: &Region) -> Option<Region> {
    producer.iter().find_map(|a| compose_pair(a, b))
}

/// Compose one consumer Region, splitting its outer loop into runs that
/// each fall inside a single producer Region.
fn compose_split(producer: &[Region], b: &Region, budget: usize, out: &mut Vec<Region>) -> bool {
    if b.volume() == 0 {
        return true;
    }
    if let Some(r) = compose_any(producer, b) {
        out.push(r);
        return out.len() <= budget;
    }
    let Some(axis) = (0..3).find(|&a| b.size[a] > 1) else {
        return false;
    };
    let n = b.size[axis];
    let mut start = 0;
    while start < n {
        let mut best = None;
        for end in (start + 1..=n).rev() {
            if let Some(r) = compose_any(producer, &sub_region(b, axis, start, end)) {
                best = Some((end, r));
                break;
            }
        }
        match best {
            Some((end, r)) => {
                out.push(r);
                start = end;
            }
            None => {
                let piece = sub_region(b, axis, start, start + 1);
                if !compose_split(producer, &piece, budget, out) {
                    return false;
                }
                start += 1;
            }
        }
        if out.len() > budget {
            return false;
        }
    }
    true
}

/// Fuse a producer/consumer chain into direct Regions.
///
/// Requires the producer to write each intermediate address at most once.
/// The result never has more Regions than the chain and never moves more
/// elements; when composition fails anywhere the chain comes back unchanged.
pub fn fuse_regions(chain: &RegionChain) -> Fused {
    let budget = chain.producer.len() + chain.consumer.len();
    let mut out = Vec::new();
    for b in &chain.consumer {
        if !compose_split(&chain.producer, b, budget, &mut out) {
            return Fused::Chain(chain.clone());
        }
    }
    Fused::Direct(out)
}

/// A random chain of two rearrangements with its buffer sizes.
#[derive(Debug, Clone)]
pub struct SampledChain {
    pub chain: RegionChain,
    pub src_len: usize,
    pub dst_len: usize,
    pub ops: [&'static str; 2],
}

fn random_op(shape: &[usize], rng: &mut ChaCha8Rng) -> (&'static str, Vec<Region>, Vec<usize>) {
    let mut pick = |n: usize| (rng.next_u64() % n as u64) as usize;
    let rank = shape.len();
    loop {
        match pick(4) {
            0 => {
                let mut perm: Vec<usize> = (0..rank).collect();
                for i in (1..rank).rev() {
                    perm.swap(i, pick(i + 1));
                }
                let out = perm.iter().map(|&p| shape[p]).collect();
                return ("transpose", region_for_transpose(shape, &perm).unwrap(), out);
            }
            1 => {
                let size: Vec<usize> = shape.iter().map(|&d| 1 + pick(d)).collect();
                let begin: Vec<usize> = shape.iter().zip(&size).map(|(&d, &s)| pick(d - s + 1)).collect();
                return ("slice", region_for_slice(shape, &begin, &size).unwrap(), size);
            }
            2 => {
                let axis = pick(rank);
                if shape[axis] < 2 {
                    continue;
                }
                let cut = 1 + pick(shape[axis] - 1);
                let (mut a, mut b) = (shape.to_vec(), shape.to_vec());
                a[axis] = cut;
                b[axis] = shape[axis] - cut;
                return ("concat", region_for_concat(&[a, b], axis).unwrap(), shape.to_vec());
            }
            _ => {
                let n = 1 + pick(shape[0] + 2);
                let indices: Vec<usize> = (0..n).map(|_| pick(shape[0])).collect();
                let mut out = shape.to_vec();
                out[0] = n;
                return ("gather", region_for_gather(shape, &indices).unwrap(), out);
            }
        }
    }
}

/// Two random transpose/slice/concat/gather steps over a random tensor of
/// rank 1 to 4 with axes of 1 to 5 elements.
pub fn sample_chain(seed: u64) -> SampledChain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rank = 1 + (rng.next_u64() % 4) as usize;
    let shape: Vec<usize> = (0..rank).map(|_| 1 + (rng.next_u64() % 5) as usize).collect();
    let (op_a, producer, mid) = random_op(&shape, &mut rng);
    let (op_b, consumer, out) = random_op(&mid, &mut rng);
    SampledChain {
        chain: RegionChain { producer, consumer, intermediate_len: mid.iter().product() },
        src_len: shape.iter().product(),
        dst_len: out.iter().product(),
        ops: [op_a, op_b],
    }
}
