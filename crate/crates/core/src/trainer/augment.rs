//! Random resized crop and photometric jitter, with the crop's effect on
//! pixel coordinates exposed so correspondences can follow it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// fraction of the image area kept by the crop
    pub crop_scale: [f64; 2],
    /// brightness, contrast, saturation, hue
    pub jitter: [f64; 4],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            crop_scale: [0.9, 1.0],
            jitter: [0.3, 0.3, 0.3, 0.1],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("crop scale must satisfy 0 < lo <= hi <= 1"));
        }
        if self.jitter[..3].iter().any(|&j| !(0.0..1.0).contains(&j)) || !(0.0..=0.5).contains(&self.jitter[3]) {
            return Err(Error::invalid("jitter strengths out of range"));
        }
        Ok(())
    }
}

/// Square crop window in source pixels, resized back to the source size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crop {
    pub x0: f64,
    pub y0: f64,
    pub side_x: f64,
    pub side_y: f64,
    pub out_w: usize,
    pub out_h: usize,
}

impl Crop {
    pub fn identity(w: usize, h: usize) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            side_x: w as f64,
            side_y: h as f64,
            out_w: w,
            out_h: h,
        }
    }

    /// Source pixel coordinate to output coordinate, `None` outside the crop.
    pub fn map_point(&self, xy: [f64; 2]) -> Option<[f64; 2]> {
        let u = (xy[0] - self.x0) * self.out_w as f64 / self.side_x;
        let v = (xy[1] - self.y0) * self.out_h as f64 / self.side_y;
        (u >= 0.0 && v >= 0.0 && u < self.out_w as f64 && v < self.out_h as f64).then_some([u, v])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Jitter {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub crop: Crop,
    pub jitter: Jitter,
}

impl Augmentation {
    pub fn identity(w: usize, h: usize) -> Self {
        Self {
            crop: Crop::identity(w, h),
            jitter: Jitter::identity(),
        }
    }

    pub fn sample(cfg: &AugmentConfig, w: usize, h: usize, rng: &mut impl Rng) -> Self {
        if !cfg.enabled {
            return Self::identity(w, h);
        }
        let scale = if cfg.crop_scale[0] < cfg.crop_scale[1] {
            rng.gen_range(cfg.crop_scale[0]..=cfg.crop_scale[1])
        } else {
            cfg.crop_scale[0]
        };
        let side = scale.sqrt();
        let (sx, sy) = (side * w as f64, side * h as f64);
        let crop = Crop {
            x0: rng.gen_range(0.0..=(w as f64 - sx)),
            y0: rng.gen_range(0.0..=(h as f64 - sy)),
            side_x: sx,
            side_y: sy,
            out_w: w,
            out_h: h,
        };
        let mut factor = |s: f64| if s > 0.0 { rng.gen_range(1.0 - s..=1.0 + s) } else { 1.0 };
        let brightness = factor(cfg.jitter[0]);
        let contrast = factor(cfg.jitter[1]);
        let saturation = factor(cfg.jitter[2]);
        let hue = if cfg.jitter[3] > 0.0 {
            rng.gen_range(-cfg.jitter[3]..=cfg.jitter[3])
        } else {
            0.0
        };
        Self {
            crop,
            jitter: Jitter {
                brightness,
                contrast,
                saturation,
                hue,
            },
        }
    }

    pub fn apply<T: Scalar>(&self, img: &Raster<T>) -> Raster<T> {
        let cropped = resample(img, &self.crop);
        jitter(&cropped, &self.jitter)
    }
}

/// Bilinear resampling of the crop window onto the output grid (pixel
/// centres at half-integers).
fn resample<T: Scalar>(img: &Raster<T>, crop: &Crop) -> Raster<T> {
    let mut out = Raster::filled(crop.out_w, crop.out_h, [T::zero(); 3]);
    let (w, h) = (img.width as f64, img.height as f64);
    for y in 0..crop.out_h {
        let sy = crop.y0 + (y as f64 + 0.5) * crop.side_y / crop.out_h as f64 - 0.5;
        let sy = sy.clamp(0.0, h - 1.0);
        let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(img.height - 1);
        for x in 0..crop.out_w {
            let sx = crop.x0 + (x as f64 + 0.5) * crop.side_x / crop.out_w as f64 - 0.5;
            let sx = sx.clamp(0.0, w - 1.0);
            let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(img.width - 1);
            for c in 0..3 {
                let top = img.at(c, x0, y0).to_f64_lossy() * (1.0 - fx) + img.at(c, x1, y0).to_f64_lossy() * fx;
                let bot = img.at(c, x0, y1).to_f64_lossy() * (1.0 - fx) + img.at(c, x1, y1).to_f64_lossy() * fx;
                out.set(c, x, y, T::lit(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    out
}

fn jitter<T: Scalar>(img: &Raster<T>, j: &Jitter) -> Raster<T> {
    let n = img.width * img.height;
    let mut px: Vec<[f64; 3]> = (0..n)
        .map(|i| [0, 1, 2].map(|c| img.data[c * n + i].to_f64_lossy()))
        .collect();
    let gray = |p: &[f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];

    for p in px.iter_mut() {
        for v in p.iter_mut() {
            *v = (*v * j.brightness).clamp(0.0, 1.0);
        }
    }
    let mean = px.iter().map(gray).sum::<f64>() / n as f64;
    for p in px.iter_mut() {
        for v in p.iter_mut() {
            *v = (mean + (*v - mean) * j.contrast).clamp(0.0, 1.0);
        }
    }
    for p in px.iter_mut() {
        let g = gray(p);
        for v in p.iter_mut() {
            *v = (g + (*v - g) * j.saturation).clamp(0.0, 1.0);
        }
    }
    if j.hue != 0.0 {
        // rotate chroma about the gray axis in YIQ space
        let (s, c) = (j.hue * std::f64::consts::TAU).sin_cos();
        for p in px.iter_mut() {
            let y = gray(p);
            let i = 0.596 * p[0] - 0.274 * p[1] - 0.322 * p[2];
            let q = 0.211 * p[0] - 0.523 * p[1] + 0.312 * p[2];
            let (i, q) = (c * i - s * q, s * i + c * q);
            let rgb = [
                y + 0.956 * i + 0.621 * q,
                y - 0.272 * i - 0.647 * q,
                y - 1.106 * i + 1.703 * q,
            ];
            for (v, r) in p.iter_mut().zip(rgb) {
                *v = r.clamp(0.0, 1.0);
            }
        }
    }
    let mut out = img.clone();
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            out.data[c * n + i] = T::lit(p[c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn gradient_raster() -> Raster<f64> {
        let (w, h) = (16, 16);
        let mut r = Raster::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                r.set(0, x, y, x as f64 / 15.0);
                r.set(1, x, y, y as f64 / 15.0);
                r.set(2, x, y, 0.5);
            }
        }
        r
    }

    #[test]
    fn identity_is_a_no_op() {
        let r = gradient_raster();
        let out = Augmentation::identity(16, 16).apply(&r);
        for (a, b) in r.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_maps_points_consistently() {
        let r = gradient_raster();
        let mut rng = rng_from_seed(2);
        let cfg = AugmentConfig {
            jitter: [0.0; 4],
            ..AugmentConfig::default()
        };
        for _ in 0..20 {
            let aug = Augmentation::sample(&cfg, 16, 16, &mut rng);
            let out = aug.apply(&r);
            // the red channel encodes source x: check it at mapped points
            for sx in [4.5f64, 8.5, 11.5] {
                if let Some([u, v]) = aug.crop.map_point([sx, 7.5]) {
                    let (ui, vi) = (u.floor() as usize, v.floor() as usize);
                    let expect = ((ui as f64 + 0.5) * aug.crop.side_x / 16.0 + aug.crop.x0 - 0.5) / 15.0;
                    assert!((out.at(0, ui, vi) - expect).abs() < 1e-9);
                    assert!((sx - 0.5 - (expect * 15.0)).abs() <= aug.crop.side_x / 16.0);
                }
            }
        }
    }

    #[test]
    fn points_outside_the_crop_are_dropped() {
        let crop = Crop {
            x0: 2.0,
            y0: 2.0,
            side_x: 12.0,
            side_y: 12.0,
            out_w: 16,
            out_h: 16,
        };
        assert!(crop.map_point([1.0, 5.0]).is_none());
        assert!(crop.map_point([14.5, 5.0]).is_none());
        let [u, v] = crop.map_point([8.0, 8.0]).unwrap();
        assert!((u - 8.0).abs() < 1e-12 && (v - 8.0).abs() < 1e-12);
    }

    #[test]
    fn jitter_stays_in_range() {
        let r = gradient_raster();
        let mut rng = rng_from_seed(9);
        let aug = Augmentation::sample(&AugmentConfig::default(), 16, 16, &mut rng);
        let out = aug.apply(&r);
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
