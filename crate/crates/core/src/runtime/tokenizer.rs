//! Byte-level tokenizer: token id = byte value, plus two specials.

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;

pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Bytes for `tokens`; BOS and EOS produce no output.
pub fn detokenize(tokens: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            0..=255 => out.push(t as u8),
            BOS | EOS => {}
            _ => return Err(Error::BadToken(format!("token id {t} is not a byte or special"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::random_f32_values;

    #[test]
    fn examples() {
        assert!(tokenize(b"").is_empty());
        assert_eq!(tokenize(b"A"), vec![65]);
        assert_eq!(detokenize(&[BOS, 104, 105, EOS]).unwrap(), b"hi");
        assert_eq!(detokenize(&[258]).unwrap_err().code(), "bad-token");
    }

    #[test]
    fn random_round_trip() {
        let bytes: Vec<u8> = random_f32_values(1024, 5).iter().map(|v| ((v + 1.0) * 127.9) as u8).collect();
        assert_eq!(detokenize(&tokenize(&bytes)).unwrap(), bytes);
    }
}
