//! Small RGB float images, channel-major.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// RGB image with values in [0, 1], stored as three consecutive planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Raster<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Dimension(format!(
                "raster data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [T; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for v in rgb {
            data.extend(std::iter::repeat(v).take(width * height));
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::filled(w, h, [T::zero(); 3]);
        let scale = T::lit(1.0 / 255.0);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, x as usize, y as usize, T::lit(px.0[c] as f64) * scale);
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let f = self.at(c, x as usize, y as usize).to_f64_lossy();
                *v = (f.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            Rgb(px)
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Schema {
                locator: path.display().to_string(),
                message: e.to_string(),
            })?
            .to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(Error::from)
    }
}

/// Binary image, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask has {} cells, expected {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resize by an integer factor reduction.
    pub fn downsample(&self, factor: usize) -> Mask {
        let (w, h) = (self.width / factor, self.height / factor);
        Mask::from_fn(w, h, |x, y| self.get(x * factor + factor / 2, y * factor + factor / 2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip() {
        let mut r = Raster::<f32>::filled(3, 2, [0.0, 0.5, 1.0]);
        r.set(0, 2, 1, 0.2);
        let back = Raster::<f32>::from_rgb8(&r.to_rgb8());
        for (a, b) in r.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.png");
        let r = Raster::<f64>::filled(4, 4, [0.2, 0.4, 0.6]);
        r.save_png(&p).unwrap();
        let q = Raster::<f64>::load_png(&p).unwrap();
        assert_eq!(r.to_rgb8(), q.to_rgb8());
    }
}
