//! Texture-grid rendering of region views.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{Mask, Raster};
use crate::scalar::Scalar;

/// Stripe texture in face coordinates: the same face point has the same
/// appearance in every view, up to per-image nuisance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub color: [f64; 3],
    pub accent: [f64; 3],
    pub orientation: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Signature {
    /// Canonical signature of vocabulary entry `i` of `n`: evenly spread
    /// hues and stripe orientations.
    pub fn for_concept(i: usize, n: usize) -> Self {
        let h = i as f64 / n.max(1) as f64;
        Self {
            color: hsv(h, 0.65, 0.85),
            accent: hsv((h + 0.5) % 1.0, 0.5, 0.35),
            orientation: (i % 4) as f64 * PI / 4.0,
            frequency: 2.0 + (i % 3) as f64,
            phase: 0.0,
        }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            color: hsv(rng.gen(), rng.gen_range(0.2..0.7), rng.gen_range(0.4..0.9)),
            accent: hsv(rng.gen(), rng.gen_range(0.2..0.7), rng.gen_range(0.2..0.5)),
            orientation: rng.gen_range(0.0..PI),
            frequency: rng.gen_range(1.5..4.5),
            phase: rng.gen_range(0.0..TAU),
        }
    }

    /// Per-landmark instance: small colour drift and a random stripe phase.
    pub fn perturbed(&self, amount: f64, rng: &mut impl Rng) -> Self {
        let mut s = *self;
        for c in s.color.iter_mut().chain(s.accent.iter_mut()) {
            *c = (*c + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0);
        }
        s.phase = rng.gen_range(0.0..TAU);
        s
    }

    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let (s, c) = self.orientation.sin_cos();
        let t = 0.5 + 0.5 * (TAU * self.frequency * (u * c + v * s) + self.phase).sin();
        [0, 1, 2].map(|k| self.accent[k] + (self.color[k] - self.accent[k]) * t)
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Per-image photometric nuisance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub gain: f64,
    pub cast: [f64; 3],
    pub noise_seed: u64,
    pub noise: f64,
}

impl Nuisance {
    pub fn none() -> Self {
        Self {
            gain: 1.0,
            cast: [0.0; 3],
            noise_seed: 0,
            noise: 0.0,
        }
    }

    pub fn sample(strength: f64, noise: f64, rng: &mut impl Rng) -> Self {
        if strength <= 0.0 {
            return Self {
                noise_seed: rng.gen(),
                noise,
                ..Self::none()
            };
        }
        Self {
            gain: rng.gen_range(1.0 - strength..=1.0 + strength),
            cast: [0; 3].map(|_| rng.gen_range(-strength / 2.0..=strength / 2.0)),
            noise_seed: rng.gen(),
            noise,
        }
    }
}

/// Axis-aligned window onto a unit face in face coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub u0: f64,
    pub v0: f64,
    pub size: f64,
}

impl Window {
    pub fn to_pixel(&self, u: f64, v: f64, w: usize, h: usize) -> [f64; 2] {
        [
            (u - self.u0) / self.size * w as f64,
            (v - self.v0) / self.size * h as f64,
        ]
    }

    pub fn to_face(&self, x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
        (self.u0 + x / w as f64 * self.size, self.v0 + y / h as f64 * self.size)
    }
}

/// Background wall seen around the face.
pub fn background_sample(u: f64, v: f64, tint: [f64; 3]) -> [f64; 3] {
    let t = 0.5 + 0.5 * ((u * 7.3).sin() * (v * 5.1).cos());
    tint.map(|c| c * (0.85 + 0.15 * t))
}

pub fn render_view<T: Scalar>(
    face: &Signature,
    tint: [f64; 3],
    window: &Window,
    nuisance: &Nuisance,
    width: usize,
    height: usize,
) -> Raster<T> {
    let mut out = Raster::filled(width, height, [T::zero(); 3]);
    let mut noise = crate::rng::rng_from_seed(nuisance.noise_seed);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = window.to_face(x as f64 + 0.5, y as f64 + 0.5, width, height);
            let base = if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) {
                face.sample(u, v)
            } else {
                background_sample(u, v, tint)
            };
            for c in 0..3 {
                let e = if nuisance.noise > 0.0 {
                    noise.gen_range(-nuisance.noise..=nuisance.noise)
                } else {
                    0.0
                };
                let val = (base[c] * nuisance.gain + nuisance.cast[c] + e).clamp(0.0, 1.0);
                out.set(c, x, y, T::lit(val));
            }
        }
    }
    out
}

/// Pixels whose centre falls on the face.
pub fn face_mask(window: &Window, width: usize, height: usize) -> Mask {
    Mask::from_fn(width, height, |x, y| {
        let (u, v) = window.to_face(x as f64 + 0.5, y as f64 + 0.5, width, height);
        (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn concept_signatures_differ() {
        let a = Signature::for_concept(0, 10);
        let b = Signature::for_concept(1, 10);
        assert_ne!(a.color, b.color);
        assert_ne!(a.orientation, b.orientation);
    }

    #[test]
    fn window_maps_are_inverse() {
        let w = Window {
            u0: -0.2,
            v0: 0.1,
            size: 1.0,
        };
        let [x, y] = w.to_pixel(0.3, 0.6, 32, 32);
        let (u, v) = w.to_face(x, y, 32, 32);
        assert!((u - 0.3).abs() < 1e-12 && (v - 0.6).abs() < 1e-12);
    }

    #[test]
    fn render_is_deterministic_and_masked() {
        let mut rng = rng_from_seed(1);
        let sig = Signature::random(&mut rng);
        let win = Window {
            u0: 0.25,
            v0: 0.0,
            size: 1.0,
        };
        let n = Nuisance::sample(0.2, 0.02, &mut rng);
        let a: Raster<f32> = render_view(&sig, [0.5; 3], &win, &n, 16, 16);
        let b: Raster<f32> = render_view(&sig, [0.5; 3], &win, &n, 16, 16);
        assert_eq!(a, b);
        let m = face_mask(&win, 16, 16);
        // the right quarter of the view is off the face
        assert_eq!(m.count(), 12 * 16);
        assert!(!m.get(15, 0) && m.get(0, 15));
    }
}
