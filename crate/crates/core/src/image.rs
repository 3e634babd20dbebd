//! RGB rasters with channel values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param("size", format!("{width}x{height} is empty")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{width}x{height} RGB needs {} values, got {}", width * height * 3, pixels.len()),
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param("pixels", format!("value {v} outside [0, 1]")));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
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

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Applies `f(x, y, rgb)` to every pixel, clamping the result to `[0, 1]`.
    pub(crate) fn map_pixels(&self, f: impl Fn(usize, usize, [f64; 3]) -> [f64; 3]) -> Image {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            let (x, y) = (i % self.width, i / self.width);
            let out = f(x, y, [px[0], px[1], px[2]]);
            pixels.extend(out.iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Image {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    /// Mean absolute per-channel difference.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "mean_abs_diff needs equal sizes"
        );
        let total: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .sum();
        total / self.pixels.len() as f64
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Image::new(width, height, pixels)
    }

    /// The image as it would read back after an 8-bit PNG round trip.
    pub fn quantized(&self) -> Image {
        Image::from_rgb8(self.width, self.height, &self.to_rgb8()).expect("same geometry")
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Image::from_rgb8(w as usize, h as usize, rgb.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length matches geometry");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }

    /// Packs equally sized images into an N×3×H×W tensor.
    pub fn batch_to_tensor(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Empty("image batch".into()))?;
        let (w, h) = (first.width, first.height);
        let plane = w * h;
        let mut data = vec![0.0; images.len() * 3 * plane];
        for (n, img) in images.iter().enumerate() {
            if (img.width, img.height) != (w, h) {
                return Err(Error::shape(
                    "batch_to_tensor",
                    format!("{}x{} vs {w}x{h}", img.width, img.height),
                ));
            }
            let base = n * 3 * plane;
            for (i, px) in img.pixels.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[base + c * plane + i] = px[c];
                }
            }
        }
        Tensor::new(vec![images.len(), 3, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_length() {
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(Image::new(2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.png");
        let img = Image::from_fn(5, 3, |x, y| [x as f64 / 4.0, y as f64 / 2.0, 0.333]);
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn tensor_layout_is_planar() {
        let img = Image::from_fn(2, 1, |x, _| [0.1 * x as f64, 0.5, 1.0]);
        let t = Image::batch_to_tensor(&[&img]).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 0.1, 0.5, 0.5, 1.0, 1.0]);
    }
}
