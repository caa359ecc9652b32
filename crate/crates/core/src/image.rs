//! Floating-point RGB images and the `NSB1` raw image file.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::wire::{self, Reader};

const MAGIC: &[u8; 4] = b"NSB1";

/// Row-major, channel-interleaved RGB image with samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// 8-bit conversion: round to nearest, clamp to `[0, 255]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, samples: &[u8]) -> Self {
        assert_eq!(samples.len(), width * height * 3);
        Self {
            width,
            height,
            data: samples.iter().map(|&v| f64::from(v) / 255.0).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        wire::put_u32(&mut out, self.width as u32);
        wire::put_u32(&mut out, self.height as u32);
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let n = width * height * 3;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from(r.f32()?));
        }
        r.finish()?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nsb1_layout() {
        let mut img = Image::new(2, 1);
        img.set_pixel(1, 0, [0.25, 0.5, 1.0]);
        let bytes = img.to_bytes();
        assert_eq!(&bytes[..4], b"NSB1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 6 * 4);
        assert_eq!(&bytes[24..28], &0.25f32.to_le_bytes());
        assert_eq!(Image::from_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = Image::new(4, 4).to_bytes();
        assert!(Image::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Image::from_bytes(b"NSB2").is_err());
    }

    #[test]
    fn u8_conversion_rounds_and_clamps() {
        assert_eq!(to_u8(-0.2), 0);
        assert_eq!(to_u8(1.3), 255);
        assert_eq!(to_u8(0.5), 128);
        assert_eq!(to_u8(10.0 / 255.0), 10);
    }
}
