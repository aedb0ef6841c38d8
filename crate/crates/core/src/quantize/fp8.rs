//! Software E4M3 8-bit float: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa
//! bits, no infinities. `S.1111.111` is NaN; the largest finite magnitude is
//! 448 (`0x7E`). Encoding rounds to nearest-even and saturates.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fp8E4M3(pub u8);

impl Fp8E4M3 {
    pub const MAX: f32 = 448.0;
    pub const MAX_BITS: u8 = 0x7E;
    const MIN_NORMAL_EXP: i32 = -6;

    pub fn encode(x: f32) -> Result<Self> {
        if x.is_nan() {
            return Err(Error::BadValue("cannot encode NaN as fp8".into()));
        }
        let sign = if x.is_sign_negative() { 0x80u8 } else { 0 };
        let a = x.abs();
        if a >= Self::MAX {
            return Ok(Self(sign | Self::MAX_BITS));
        }
        let min_normal = 2f32.powi(Self::MIN_NORMAL_EXP);
        if a < min_normal {
            // subnormal quantum is 2^-9; q == 8 lands exactly on the smallest normal
            let q = (a * 512.0).round_ties_even() as u8;
            return Ok(Self(sign | q));
        }
        let mut exp = ((a.to_bits() >> 23) & 0xFF) as i32 - 127;
        // scaling by a power of two is exact, so the rounding below is the only rounding
        let mut q = (a * 2f32.powi(3 - exp)).round_ties_even() as u32;
        if q == 16 {
            exp += 1;
            q = 8;
        }
        let bits = (((exp + 7) as u32) << 3) | (q - 8);
        Ok(Self(sign | bits as u8))
    }

    pub fn decode(self) -> f32 {
        let sign = if self.0 & 0x80 != 0 { -1.0 } else { 1.0 };
        let exp = ((self.0 >> 3) & 0x0F) as i32;
        let mant = (self.0 & 0x07) as f32;
        if exp == 0x0F && self.0 & 0x07 == 0x07 {
            return f32::NAN;
        }
        if exp == 0 {
            sign * mant * 2f32.powi(-9)
        } else {
            sign * (1.0 + mant / 8.0) * 2f32.powi(exp - 7)
        }
    }
}

pub fn encode_fp8(x: f32) -> Result<Fp8E4M3> {
    Fp8E4M3::encode(x)
}

pub fn decode_fp8(c: Fp8E4M3) -> f32 {
    c.decode()
}

/// Encode a value vector into E4M3 bytes.
pub fn encode_values(values: &[f32]) -> Result<Vec<u8>> {
    values.iter().map(|&v| Fp8E4M3::encode(v).map(|c| c.0)).collect()
}

pub fn decode_values(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| Fp8E4M3(b).decode()).collect()
}
