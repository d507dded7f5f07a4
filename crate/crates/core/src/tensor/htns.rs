//! The HTNS tensor file format.
//!
//! ```text
//! "HTNS"            4 bytes magic
//! rank              u32 little-endian
//! extents           rank × u64 little-endian
//! payload           row-major f32 little-endian IEEE-754
//! ```
//!
//! Values are narrowed to `f32` on write and widened back to `f64` on read.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HTNS";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        kind: "HTNS",
        message: message.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(format_err("missing HTNS magic"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header = 8 + 8 * rank;
    if bytes.len() < header {
        return Err(format_err(format!("truncated header for rank {rank}")));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err("extent product overflows"))?;
    let payload = &bytes[header..];
    if payload.len() != numel * 4 {
        return Err(format_err(format!(
            "payload of {} bytes does not match shape {shape:?}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        let mut expect = b"HTNS".to_vec();
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(decode(b"NOPE\0\0\0\0").is_err());
        let mut bytes = encode(&Tensor::ones(&[3]));
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_through_f32(shape in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) as f64 * 1e-3).sin() as f32 as f64).collect();
            let t = Tensor::new(&shape, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
