//! In-memory raster images, PNG round-trips and resampling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// H x W x C raster with values in [0,1], row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        ImageBuffer {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    /// Checks the buffer invariants: length, finiteness, range.
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.width * self.height * self.channels {
            return Err(Error::SizeMismatch(format!(
                "image data length {} != {}x{}x{}",
                self.data.len(),
                self.width,
                self.height,
                self.channels
            )));
        }
        for &v in &self.data {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid("image", format!("pixel value {v} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Rescales values so min maps to 0 and max to 1. Constant images
    /// become mid-gray.
    pub fn normalize_in_place(&mut self) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        if span <= 1e-9 {
            for v in &mut self.data {
                *v = 0.5;
            }
        } else {
            for v in &mut self.data {
                *v = ((*v - lo) / span).clamp(0.0, 1.0);
            }
        }
    }

    /// Per-pixel mean over channels.
    pub fn luminance(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.width * self.height];
        for p in 0..out.len() {
            let mut s = 0.0;
            for c in 0..self.channels {
                s += self.data[p * self.channels + c];
            }
            out[p] = s / self.channels as f32;
        }
        out
    }

    /// Bilinear sample with half-pixel centers; coordinates are in pixel
    /// units of this image. Clamps to the border.
    pub fn sample_bilinear(&self, x: f32, y: f32, c: usize) -> f32 {
        let xm = (self.width - 1) as f32;
        let ym = (self.height - 1) as f32;
        let xc = x.clamp(0.0, xm);
        let yc = y.clamp(0.0, ym);
        let x0 = xc.floor();
        let y0 = yc.floor();
        let fx = xc - x0;
        let fy = yc - y0;
        let x0 = x0 as usize;
        let y0 = y0 as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let v00 = self.get(x0, y0, c);
        let v10 = self.get(x1, y0, c);
        let v01 = self.get(x0, y1, c);
        let v11 = self.get(x1, y1, c);
        let top = v00 + (v10 - v00) * fx;
        let bot = v01 + (v11 - v01) * fx;
        top + (bot - top) * fy
    }

    /// 8-bit PNG, round-to-nearest quantization.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let quant = |v: f32| -> u8 { (v * 255.0).round().clamp(0.0, 255.0) as u8 };
        let w = self.width as u32;
        let h = self.height as u32;
        let res = if self.channels == 1 {
            let buf: Vec<u8> = self.data.iter().map(|&v| quant(v)).collect();
            let img = image::GrayImage::from_raw(w, h, buf).expect("sized buffer");
            img.save_with_format(path, image::ImageFormat::Png)
        } else {
            let buf: Vec<u8> = self.data.iter().map(|&v| quant(v)).collect();
            let img = image::RgbImage::from_raw(w, h, buf).expect("sized buffer");
            img.save_with_format(path, image::ImageFormat::Png)
        };
        res.map_err(|e| Error::format(path, format!("png encode: {e}")))
    }

    pub fn load_png(path: &Path) -> Result<ImageBuffer> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::format(path, format!("png decode: {e}")))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageLuma8(g) => {
                let data = g.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
                Ok(ImageBuffer {
                    width: w,
                    height: h,
                    channels: 1,
                    data,
                })
            }
            other => {
                let rgb = other.into_rgb8();
                let data = rgb.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
                Ok(ImageBuffer {
                    width: w,
                    height: h,
                    channels: 3,
                    data,
                })
            }
        }
    }

    /// Packs a batch of equally-sized images into a [B,H,W,C] tensor.
    pub fn batch_to_tensor(images: &[&ImageBuffer]) -> Result<Tensor<f32>> {
        let first = images.first().ok_or_else(|| Error::invalid("batch", "empty"))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.height != h || img.width != w || img.channels != c {
                return Err(Error::SizeMismatch(format!(
                    "batch image {}x{}x{} != {}x{}x{}",
                    img.height, img.width, img.channels, h, w, c
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::from_vec(&[images.len(), h, w, c], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageBuffer::new(9, 7, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f32 / 255.0;
        }
        let path = dir.path().join("t.png");
        img.save_png(&path).unwrap();
        let back = ImageBuffer::load_png(&path).unwrap();
        assert_eq!(back.width, 9);
        assert_eq!(back.height, 7);
        assert_eq!(back.channels, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn bilinear_at_pixel_centers_is_exact() {
        let mut img = ImageBuffer::new(4, 4, 1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32 / 15.0;
        }
        for y in 0..4 {
            for x in 0..4 {
                let v = img.sample_bilinear(x as f32, y as f32, 0);
                assert_eq!(v, img.get(x, y, 0));
            }
        }
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let mut img = ImageBuffer::new(2, 2, 1);
        img.data[3] = 1.5;
        assert!(img.validate().is_err());
    }
}
