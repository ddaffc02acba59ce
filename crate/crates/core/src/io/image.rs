// SPDX-License-Identifier: Apache-2.0

//! Netpbm (P5/P6, 8-bit) and PFM readers and writers.
//!
//! 8-bit samples map to `[0, 1]` as `v / maxval`. PFM files are written
//! little-endian with rows bottom to top; one-channel maps use `Pf`, three
//! channel maps `PF`, and any other channel count is stacked vertically into
//! a `Pf` of height `C·H`.

use std::fs;
use std::path::Path;

use crate::error::{read_file, Error, Result};
use crate::tensor::{image_dims, Tensor};

fn parse_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse(msg.into()))
}

/// Header tokens separated by whitespace and `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn token(&mut self) -> Result<&'a str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(_) => break,
                None => return parse_err("unexpected end of header"),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).or_else(|_| parse_err("non-ASCII header"))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let t = self.token()?;
        t.parse().or_else(|_| parse_err(format!("bad {what} '{t}'")))
    }

    /// Consumes the single whitespace byte that ends a header.
    fn end(&mut self) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(&self.bytes[self.pos + 1..]),
            _ => parse_err("header must end with one whitespace byte"),
        }
    }
}

fn decode_netpbm(bytes: &[u8], channels: usize) -> Result<Tensor> {
    let mut h = Header { bytes, pos: 2 };
    let width: usize = h.number("width")?;
    let height: usize = h.number("height")?;
    let maxval: u32 = h.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return parse_err(format!("unsupported maxval {maxval} (1..=255)"));
    }
    if width == 0 || height == 0 {
        return parse_err("empty image");
    }
    let body = h.end()?;
    let n = width * height * channels;
    if body.len() < n {
        return parse_err(format!("pixel data has {} bytes, expected {n}", body.len()));
    }
    let m = maxval as f64;
    let mut data = vec![0.0; n];
    for (p, px) in body[..n].chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            if v as u32 > maxval {
                return parse_err(format!("sample {v} exceeds maxval {maxval}"));
            }
            data[c * width * height + p] = v as f64 / m;
        }
    }
    Tensor::new(&[channels, height, width], data)
}

fn decode_pfm(bytes: &[u8], channels: usize) -> Result<Tensor> {
    let mut h = Header { bytes, pos: 2 };
    let width: usize = h.number("width")?;
    let height: usize = h.number("height")?;
    let scale: f64 = h.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return parse_err(format!("bad PFM scale {scale}"));
    }
    let body = h.end()?;
    let n = width * height * channels;
    if body.len() < 4 * n {
        return parse_err(format!("PFM data has {} bytes, expected {}", body.len(), 4 * n));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; n];
    for (i, b) in body[..4 * n].chunks_exact(4).enumerate() {
        let raw = [b[0], b[1], b[2], b[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row_from_bottom, rest) = (i / (width * channels), i % (width * channels));
        let (col, c) = (rest / channels, rest % channels);
        let row = height - 1 - row_from_bottom;
        data[(c * height + row) * width + col] = v as f64;
    }
    Tensor::new(&[channels, height, width], data)
}

/// Decodes P5, P6, `Pf` or `PF` bytes into a `C×H×W` tensor.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    match bytes.get(..2) {
        Some(b"P5") => decode_netpbm(bytes, 1),
        Some(b"P6") => decode_netpbm(bytes, 3),
        Some(b"Pf") => decode_pfm(bytes, 1),
        Some(b"PF") => decode_pfm(bytes, 3),
        _ => parse_err("unknown image magic (expected P5, P6, Pf or PF)"),
    }
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    decode_image(&read_file(path)?).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Raw 8-bit Netpbm file; `channels` is 1 (P5) or 3 (P6) and `samples`
/// interleaved.
pub fn encode_netpbm(width: usize, height: usize, channels: usize, samples: &[u8]) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Shape(format!("8-bit images have 1 or 3 channels, got {channels}"))),
    };
    if samples.len() != width * height * channels {
        return Err(Error::Shape(format!(
            "{width}×{height}×{channels} image needs {} samples, got {}",
            width * height * channels,
            samples.len()
        )));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    Ok(out)
}

/// PGM (1 channel) or PPM (3 channels) of values in `[0, 1]`; values outside
/// are clamped.
pub fn encode_8bit(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image_dims(t.shape())?;
    let d = t.data();
    let mut samples = Vec::with_capacity(d.len());
    for p in 0..h * w {
        for ch in 0..c {
            samples.push(quantize(d[ch * h * w + p]));
        }
    }
    encode_netpbm(w, h, c, &samples)
}

pub fn encode_pfm(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image_dims(t.shape())?;
    let (magic, channels, height) = match c {
        3 => ("PF", 3, h),
        _ => ("Pf", 1, c * h),
    };
    let d = t.data();
    let mut out = format!("{magic}\n{w} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for col in 0..w {
            for ch in 0..channels {
                let v = if channels == 3 {
                    d[(ch * h + row) * w + col]
                } else {
                    d[row * w + col]
                };
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Writes by extension: `.pgm`/`.ppm` (8-bit) or `.pfm`.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let bytes = match ext {
        "pfm" => encode_pfm(t)?,
        "pgm" | "ppm" => encode_8bit(t)?,
        _ => return Err(Error::Config(format!("unknown image extension '{ext}'"))),
    };
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_definition() {
        let mut f = b"P5\n# comment\n2 2\n255\n".to_vec();
        f.extend_from_slice(&[0, 128, 255, 64]);
        let t = decode_image(&f).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
        assert_eq!(encode_8bit(&t).unwrap(), b"P5\n2 2\n255\n\x00\x80\xff\x40");
    }

    #[test]
    fn p6_channel_order() {
        let mut f = b"P6 2 1 255\n".to_vec();
        f.extend_from_slice(&[255, 0, 0, 0, 51, 255]);
        let t = decode_image(&f).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.2, 0.0, 1.0]);
        let back = encode_8bit(&t).unwrap();
        assert_eq!(decode_image(&back).unwrap(), t);
    }

    #[test]
    fn small_maxval() {
        let t = decode_image(b"P5 3 1 2\n\x00\x01\x02").unwrap();
        assert_eq!(t.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn header_errors() {
        assert!(decode_image(b"P5 2 2 65535\n\0\0\0\0\0\0\0\0").is_err());
        assert!(decode_image(b"P5 2 2 0\n\0\0\0\0").is_err());
        assert!(decode_image(b"P5 2 x 255\n\0\0\0\0").is_err());
        assert!(decode_image(b"P5 2 2 255\n\0\0").is_err());
        assert!(decode_image(b"P3 1 1 255\n0").is_err());
        assert!(decode_image(b"P5 1 1 10\n\x0b").is_err());
        assert!(decode_image(b"P5").is_err());
    }

    fn f32_map(shape: &[usize], seed: u64) -> Tensor {
        let t = Tensor::seeded_gaussian(shape, seed).unwrap();
        t.map(|v| v as f32 as f64)
    }

    #[test]
    fn pfm_round_trips_bit_exact() {
        for (shape, seed) in [(vec![1, 5, 7], 1), (vec![3, 4, 2], 2)] {
            let t = f32_map(&shape, seed);
            let back = decode_image(&encode_pfm(&t).unwrap()).unwrap();
            assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn pfm_layout() {
        let t = Tensor::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap();
        let b = encode_pfm(&t).unwrap();
        let head = b"Pf\n1 2\n-1.0\n";
        assert_eq!(&b[..head.len()], head);
        // bottom row first
        assert_eq!(&b[head.len()..head.len() + 4], &2.0f32.to_le_bytes());
        let stacked = f32_map(&[2, 3, 3], 4);
        let back = decode_image(&encode_pfm(&stacked).unwrap()).unwrap();
        assert_eq!(back.shape(), &[1, 6, 3]);
        assert_eq!(back.data(), stacked.data());
    }

    #[test]
    fn big_endian_pfm() {
        let mut f = b"Pf\n1 1\n1.0\n".to_vec();
        f.extend_from_slice(&1.5f32.to_be_bytes());
        assert_eq!(decode_image(&f).unwrap().data(), &[1.5]);
    }
}
