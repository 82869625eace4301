//! Grayscale images on the square `[-1, 1]²` that circumscribes the unit disc.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Result, TomoError};
use crate::mesh::Point;

/// Side length of every image the pipeline writes.
pub const IMAGE_SIZE: usize = 256;

/// Row-major grid of values in `[0, 1]`; row 0 is the top (`y = +1`).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(TomoError::shape(format!("{width}x{height} pixels"), pixels.len()));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TomoError::Config(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels })
    }

    /// Square image of the default size with `f(x, y)` sampled at pixel
    /// centres; values are clamped into `[0, 1]`.
    pub fn from_fn(size: usize, mut f: impl FnMut(Point) -> f64) -> Self {
        let mut img = Self::zeros(size, size);
        for r in 0..size {
            for c in 0..size {
                img.pixels[r * size + c] = f(img.pixel_center(r, c)).clamp(0.0, 1.0);
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value.clamp(0.0, 1.0);
    }

    /// Centre of pixel `(row, col)` in disc coordinates.
    pub fn pixel_center(&self, row: usize, col: usize) -> Point {
        Point::new(
            -1.0 + (col as f64 + 0.5) * 2.0 / self.width as f64,
            1.0 - (row as f64 + 0.5) * 2.0 / self.height as f64,
        )
    }

    pub fn in_disc(&self, row: usize, col: usize) -> bool {
        self.pixel_center(row, col).coords.norm_squared() <= 1.0
    }

    /// 8-bit quantization `round(255·v)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer length matches dimensions");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png(data: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(data, image::ImageFormat::Png)?.into_luma8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Self::from_pixels(w as usize, h as usize, pixels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_png()?).map_err(TomoError::file(path))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_png(&fs::read(path).map_err(TomoError::file(path))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_centres_span_the_square() {
        let img = GrayImage::zeros(256, 256);
        let tl = img.pixel_center(0, 0);
        let br = img.pixel_center(255, 255);
        assert!((tl.x + 1.0 - 1.0 / 256.0).abs() < 1e-15 && (tl.y - 1.0 + 1.0 / 256.0).abs() < 1e-15);
        assert!((br.x - 1.0 + 1.0 / 256.0).abs() < 1e-15 && (br.y + 1.0 - 1.0 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn png_round_trip_quantizes_to_eight_bits() {
        let img = GrayImage::from_fn(16, |p| (p.x + 1.0) / 2.0);
        let back = GrayImage::from_png(&img.to_png().unwrap()).unwrap();
        assert_eq!(back.shape(), (16, 16));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(back.to_png().unwrap(), GrayImage::from_png(&back.to_png().unwrap()).unwrap().to_png().unwrap());
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(GrayImage::from_pixels(1, 1, vec![1.5]).is_err());
        assert!(GrayImage::from_pixels(2, 1, vec![0.5]).is_err());
    }
}
