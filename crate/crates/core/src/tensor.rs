//! Element types, the dense tensor container and deterministic random
//! tensor generation.
//!
//! Tensors are immutable, row-major byte buffers. The binary dump format
//! used inside model files is:
//!
//! ```text
//! b"TFTENSR1" | u8 etype tag | u8 rank | rank x u32 extents (LE) | payload (LE)
//! ```

use std::io::{Read, Write};

use half::bf16;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"TFTENSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementType {
    F32,
    BF16,
    I8,
    /// Two signed 4-bit codes per byte, low nibble first.
    I4P,
    FP8E4M3,
    I32,
}

impl ElementType {
    pub fn tag(self) -> u8 {
        match self {
            ElementType::F32 => 0,
            ElementType::BF16 => 1,
            ElementType::I8 => 2,
            ElementType::I4P => 3,
            ElementType::FP8E4M3 => 4,
            ElementType::I32 => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => ElementType::F32,
            1 => ElementType::BF16,
            2 => ElementType::I8,
            3 => ElementType::I4P,
            4 => ElementType::FP8E4M3,
            5 => ElementType::I32,
            t => return Err(Error::BadModel(format!("unknown element type tag {t}"))),
        })
    }

    /// Bytes needed to hold `n` elements of this type.
    pub fn byte_len(self, n: usize) -> usize {
        match self {
            ElementType::F32 | ElementType::I32 => 4 * n,
            ElementType::BF16 => 2 * n,
            ElementType::I8 | ElementType::FP8E4M3 => n,
            ElementType::I4P => n.div_ceil(2),
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, ElementType::F32 | ElementType::BF16)
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::BadShape("rank must be at least 1".into()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::BadShape(format!("zero extent in {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::BadShape(format!("element count overflows for {shape:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    etype: ElementType,
    data: Vec<u8>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, etype: ElementType, data: Vec<u8>) -> Result<Self> {
        let n = check_shape(&shape)?;
        let want = etype.byte_len(n);
        if data.len() != want {
            return Err(Error::BadShape(format!(
                "{:?} tensor of shape {shape:?} needs {want} bytes, got {}",
                etype,
                data.len()
            )));
        }
        Ok(Self { shape, etype, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(shape, ElementType::F32, data)
    }

    pub fn from_bf16(shape: Vec<usize>, values: &[bf16]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(shape, ElementType::BF16, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn etype(&self) -> ElementType {
        self.etype
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decode a float tensor into `f32` values.
    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        match self.etype {
            ElementType::F32 => Ok(self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()),
            ElementType::BF16 => Ok(self
                .data
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect()),
            other => Err(Error::BadCast(format!("{other:?} is not a float type"))),
        }
    }

    /// Convert between `F32` and `BF16`.
    ///
    /// `F32 -> BF16` rounds to nearest, ties to even; `BF16 -> F32` is exact.
    pub fn cast(&self, to: ElementType) -> Result<Tensor> {
        if !self.etype.is_float() || !to.is_float() {
            return Err(Error::BadCast(format!("{:?} -> {:?}", self.etype, to)));
        }
        if self.etype == to {
            return Ok(self.clone());
        }
        let values = self.to_f32_vec()?;
        match to {
            ElementType::BF16 => {
                let half: Vec<bf16> = values.iter().map(|&v| bf16::from_f32(v)).collect();
                Tensor::from_bf16(self.shape.clone(), &half)
            }
            _ => Tensor::from_f32(self.shape.clone(), &values),
        }
    }

    pub fn write_dump<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::BadShape("rank does not fit in a u8".into()));
        }
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&[self.etype.tag(), self.shape.len() as u8])?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::BadShape(format!("extent {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&self.data)?;
        Ok(())
    }

    /// Read one dump written by [`Tensor::write_dump`]. The magic must already
    /// be unread (this function consumes and checks it).
    pub fn read_dump<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::BadModel("missing tensor magic".into()));
        }
        Self::read_dump_body(r)
    }

    pub(crate) fn read_dump_body<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut head = [0u8; 2];
        r.read_exact(&mut head).map_err(truncated)?;
        let etype = ElementType::from_tag(head[0])?;
        let rank = head[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(truncated)?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let n = check_shape(&shape).map_err(|e| Error::BadModel(e.to_string()))?;
        let mut data = vec![0u8; etype.byte_len(n)];
        r.read_exact(&mut data).map_err(truncated)?;
        Tensor::new(shape, etype, data)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::BadModel("truncated tensor record".into())
    } else {
        Error::Io(e)
    }
}

/// Uniform `[-1, 1)` values from ChaCha8 seeded with `seed`.
///
/// Each value takes the top 24 bits of one `next_u32` draw, so every sample
/// is exactly representable in `f32` and the stream is identical on every
/// platform.
pub fn random_f32_values(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let bits = rng.next_u32() >> 8;
            bits as f32 * (1.0 / (1u32 << 23) as f32) - 1.0
        })
        .collect()
}

pub fn make_random_tensor(shape: &[usize], etype: ElementType, seed: u64) -> Result<Tensor> {
    let n = check_shape(shape)?;
    if !etype.is_float() {
        return Err(Error::BadCast(format!("random tensors must be F32 or BF16, got {etype:?}")));
    }
    let values = random_f32_values(n, seed);
    Tensor::from_f32(shape.to_vec(), &values)?.cast(etype)
}
