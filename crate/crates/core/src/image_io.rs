//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

fn format_err(msg: &str) -> Error {
    Error::Format(msg.to_string())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err("malformed header number"))
    }
}

/// Decodes a P5/P6 image into `[H, W, 3]` values in `[0, 1]`; gray images are replicated.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(format_err("not a binary PPM/PGM file")),
    };
    let mut hd = Header { bytes, pos: 2 };
    let width = hd.number()?;
    let height = hd.number()?;
    let maxval = hd.number()?;
    if maxval != 255 {
        return Err(format_err("only 8-bit images are supported"));
    }
    if width == 0 || height == 0 {
        return Err(format_err("empty image"));
    }
    // exactly one whitespace byte separates the header from the samples
    let start = hd.pos + 1;
    let n = width * height * channels;
    let pixels = bytes
        .get(start..start + n)
        .ok_or_else(|| format_err("pixel data truncated"))?;
    let mut data = Vec::with_capacity(width * height * 3);
    for px in pixels.chunks_exact(channels) {
        for c in 0..3 {
            data.push(f64::from(px[c % channels]) / 255.0);
        }
    }
    Tensor::new(&[height, width, 3], data)
}

/// Rounds `[0, 1]` values to 8-bit samples.
pub fn to_u8(x: &Tensor) -> Vec<u8> {
    x.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Encodes a `[H, W, 3]` image as P6.
pub fn encode_ppm(x: &Tensor) -> Result<Vec<u8>> {
    let [h, w, 3] = *x.shape() else {
        return Err(invalid!("expected [H,W,3], got {:?}", x.shape()));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(to_u8(x));
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn write_ppm(path: &Path, x: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(x)?)?;
    Ok(())
}

/// Quantizes to 8 bits and back, as a saved image would be.
pub fn quantize_8bit(x: &Tensor) -> Tensor {
    x.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}
