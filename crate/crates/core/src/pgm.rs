//! 16-bit binary PGM (`P5`, maxval 65535, big-endian samples).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAXVAL: u16 = u16::MAX;

/// Nearest 16-bit level of a `[0, 1]` intensity.
pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * MAXVAL as f64).round() as u16
}

pub fn dequantize(q: u16) -> f64 {
    q as f64 / MAXVAL as f64
}

/// Encodes an `[H, W]` (or `[1, H, W]`) image with values in `[0, 1]`.
pub fn encode_pgm16(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [h, w] | [1, h, w] => (h, w),
        _ => return Err(Error::dim("encode_pgm16", image.shape(), &[1, 0, 0])),
    };
    let mut out = format!("P5\n{w} {h}\n{MAXVAL}\n").into_bytes();
    out.reserve(2 * h * w);
    for &v in image.data() {
        out.extend_from_slice(&quantize(v).to_be_bytes());
    }
    Ok(out)
}

/// Decodes a 16-bit `P5` file into an `[H, W]` tensor scaled to `[0, 1]`.
pub fn decode_pgm16(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::format("pgm", m.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("header field is not a number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != MAXVAL as usize {
        return Err(bad("only 16-bit PGM (maxval 65535) is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != 2 * w * h {
        return Err(bad("raster size does not match the header"));
    }
    let data = raster
        .chunks_exact(2)
        .map(|c| dequantize(u16::from_be_bytes([c[0], c[1]])))
        .collect();
    Tensor::new([h, w], data)
}

pub fn save_pgm16(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm16(image)?).map_err(|e| Error::io(path, e))
}

pub fn load_pgm16(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_pgm16(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
