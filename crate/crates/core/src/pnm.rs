//! Binary PPM (P6) and PGM (P5) images, 8-bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const WHAT: &str = "pnm";
/// Largest accepted width or height.
pub const MAX_SIDE: usize = 1 << 14;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(magic: &str, img: &Tensor<f32>, channels: usize) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != channels {
        return Err(Error::Shape(format!("{magic} needs [{channels},H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    out.reserve(channels * h * w);
    for p in 0..h * w {
        for c in 0..channels {
            out.push(quantize(d[c * h * w + p]));
        }
    }
    Ok(out)
}

/// Encodes a `[3, H, W]` image in `[0, 1]` as P6.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    encode("P6", img, 3)
}

/// Encodes a `[1, H, W]` image in `[0, 1]` as P5.
pub fn encode_pgm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    encode("P5", img, 1)
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

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos || self.pos - start > 9 {
            return Err(Error::format(WHAT, format!("bad {field} at byte {start}")));
        }
        Ok(std::str::from_utf8(&self.bytes[start..self.pos]).unwrap().parse().unwrap())
    }
}

/// Decodes P5 or P6 bytes into `[1, H, W]` or `[3, H, W]` in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::format(WHAT, "missing P5/P6 magic")),
    };
    let mut hdr = Header { bytes, pos: 2 };
    let w = hdr.number("width")?;
    let h = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if w == 0 || h == 0 || w > MAX_SIDE || h > MAX_SIDE {
        return Err(Error::format(WHAT, format!("unsupported size {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(WHAT, format!("maxval {maxval} is not 8-bit")));
    }
    if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(WHAT, "no whitespace after header"));
    }
    let payload = &bytes[hdr.pos + 1..];
    let n = channels * h * w;
    if payload.len() < n {
        return Err(Error::format(WHAT, format!("truncated payload: {} of {n} bytes", payload.len())));
    }
    let maxf = maxval as f32;
    let mut data = vec![0.0f32; n];
    for p in 0..h * w {
        for c in 0..channels {
            let v = payload[p * channels + c] as usize;
            if v > maxval {
                return Err(Error::format(WHAT, format!("sample {v} exceeds maxval {maxval}")));
            }
            data[c * h * w + p] = v as f32 / maxf;
        }
    }
    Tensor::new(&[channels, h, w], data)
}

fn read_kind(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = decode_pnm(&bytes)?;
    if img.shape()[0] != channels {
        return Err(Error::format(WHAT, format!("{} is not a {}-channel image", path.display(), channels)));
    }
    Ok(img)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_kind(path.as_ref(), 3)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_kind(path.as_ref(), 1)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_square_bytes() {
        let mut d = vec![0.0f32; 12];
        d[..4].fill(1.0);
        let img = Tensor::new(&[3, 2, 2], d).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0xFF, 0, 0].repeat(4)[..]);
    }

    #[test]
    fn header_comments_and_maxval() {
        let bytes = b"P5 # c\n2 1\n# x\n15\n\x0f\x00";
        let img = decode_pnm(bytes).unwrap();
        assert_eq!(img.shape(), &[1, 1, 2]);
        assert_eq!(img.data(), &[1.0, 0.0]);
    }

    #[test]
    fn malformed_inputs() {
        for bad in
            [&b"P3\n1 1\n255\n\x00"[..], b"P6\n1 1\n255\n\x00", b"P5\n0 1\n255\n", b"P5\n1 1\n256\n\x00", b"P5 1"]
        {
            assert!(decode_pnm(bad).is_err(), "{bad:?}");
        }
    }
}
