//! Square single-channel images with intensities in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    resolution: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(resolution: usize, pixels: Vec<f32>) -> Result<Self> {
        if resolution == 0 || pixels.len() != resolution * resolution {
            return Err(Error::invalid(format!(
                "image buffer of {} pixels does not match resolution {resolution}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("image contains non-finite pixels"));
        }
        Ok(Self { resolution, pixels })
    }

    pub fn blank(resolution: usize) -> Self {
        Self {
            resolution,
            pixels: vec![0.0; resolution * resolution],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.resolution + col]
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    /// Number of pixels with non-zero intensity.
    pub fn lit_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0.0).count()
    }

    /// Quantises to 8 bits and encodes as grayscale PNG.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let r = self.resolution as u32;
        let img = GrayImage::from_fn(r, r, |x, y| {
            let v = self.pixels[y as usize * self.resolution + x as usize];
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Decodes any PNG; colour inputs are converted to luma. Non-square
    /// images are rejected.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::invalid(format!("image must be square, got {w}x{h}")));
        }
        let pixels = img.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
        Self::new(w as usize, pixels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }

    /// 8-bit quantised copy, i.e. what a PNG round trip yields.
    pub fn quantized(&self) -> Self {
        Self {
            resolution: self.resolution,
            pixels: self
                .pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_matches_quantisation() {
        let pixels: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
        let img = Image::new(8, pixels).unwrap();
        let back = Image::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(Image::new(4, vec![0.0; 15]).is_err());
    }
}
