//! Grayscale images in `[0, 1]` and 8-bit binary PGM (P5) I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Upper bound on decoded pixel count, so a hostile header cannot request
/// an arbitrarily large allocation.
pub const MAX_PIXELS: usize = 1 << 26;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    /// Builds an image from `f(x, y)`, clamping into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Pixel at clamped integer coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap::new(1, self.height, self.width, self.pixels.clone())
            .expect("image dimensions are consistent")
    }

    /// Quantizes to 8 bits, as written to disk.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_pgm())?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        decode_pgm(&std::fs::read(path)?)
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos || self.pos - start > 9 {
            return Err(Error::Format(format!("PGM {what} missing or too long")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        Ok(s.parse().expect("at most nine digits"))
    }
}

/// Decodes an 8-bit binary PGM, mapping `0..=maxval` linearly onto `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (missing P5 magic)".into()));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format("PGM with zero dimension".into()));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    let n = width
        .checked_mul(height)
        .filter(|&n| n <= MAX_PIXELS)
        .ok_or_else(|| Error::Format("PGM too large".into()))?;
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(Error::Format("PGM header not terminated".into())),
    }
    let data = bytes
        .get(h.pos..h.pos + n)
        .ok_or_else(|| Error::Format("PGM pixel data truncated".into()))?;
    let scale = maxval as f64;
    let pixels = data.iter().map(|&b| (b as f64 / scale).min(1.0)).collect();
    GrayImage::new(width, height, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_of_quantized_image() {
        let img = GrayImage::from_fn(7, 5, |x, y| ((x * 31 + y * 17) % 256) as f64 / 255.0);
        let back = decode_pgm(&img.encode_pgm()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_comments_and_maxval() {
        let mut bytes = b"P5\n# made by hand\n2 1\n# max\n100\n".to_vec();
        bytes.extend([0u8, 100]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_inputs_are_format_errors() {
        for bad in [
            &b"P2\n1 1\n255\n\x00"[..],
            b"P5\n1 1\n255",
            b"P5\n2 2\n255\n\x00\x00",
            b"P5\n0 4\n255\n",
            b"P5\n1 1\n65535\n\x00\x00",
            b"P5\n99999999 99999999\n255\n",
            b"P5 1 1 255 ",
        ] {
            assert!(matches!(decode_pgm(bad), Err(Error::Format(_))), "{bad:?}");
        }
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(GrayImage::new(1, 1, vec![1.5]).is_err());
        assert!(GrayImage::new(2, 1, vec![0.5]).is_err());
    }
}
