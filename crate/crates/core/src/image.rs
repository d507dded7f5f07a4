//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.
//!
//! Colour images are held as `[3, H, W]` tensors with values in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        kind: "PNM",
        message: message.into(),
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidShape {
            what: "PPM image [3, H, W]".into(),
            shape: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + p]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(values: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

/// Splits a PNM header into (magic, width, height, maxval, payload offset).
fn parse_header(bytes: &[u8]) -> Result<(&[u8], usize, usize, usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(format_err("truncated header"));
        }
        fields.push(&bytes[start..i]);
    }
    // exactly one whitespace byte separates the header from the samples
    i += 1;
    let num = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(format!("bad header field {:?}", String::from_utf8_lossy(f))))
    };
    Ok((fields[0], num(fields[1])?, num(fields[2])?, num(fields[3])?, i))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (magic, w, h, maxval, off) = parse_header(bytes)?;
    if magic != b"P6" {
        return Err(format_err("expected P6 magic"));
    }
    if maxval != 255 {
        return Err(format_err(format!("only 8-bit samples are supported, got maxval {maxval}")));
    }
    let payload = bytes.get(off..).unwrap_or(&[]);
    if payload.len() != 3 * w * h {
        return Err(format_err(format!("expected {} sample bytes, found {}", 3 * w * h, payload.len())));
    }
    let mut data = vec![0.0; 3 * h * w];
    for (p, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_pgm(path: impl AsRef<Path>, values: &[u8], height: usize, width: usize) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(values, height, width)).map_err(|e| Error::io(path, e))
}

/// Rounds every sample to the nearest 8-bit level, i.e. what a PPM
/// round trip would return.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| to_byte(v) as f64 / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_quantization() {
        let img = Tensor::from_fn(&[3, 5, 7], |i| (i as f64 * 0.37).sin().abs());
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert!(back.bit_eq(&quantize(&img)));
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(encode_ppm(&Tensor::zeros(&[1, 2, 2])).is_err());
    }
}
