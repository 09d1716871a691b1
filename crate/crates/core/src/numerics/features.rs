use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{norm, Scalar};

/// Dense per-pixel descriptors, pixel-major: the `channels` values of pixel
/// (x, y) live at `data[(y * width + x) * channels ..][..channels]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    pub normalized: bool,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "feature data has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            normalized: false,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
            normalized: false,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.channels)
    }
}

/// Tolerance on ‖v‖ − 1 for inputs that must be unit length.
pub fn unit_tolerance<T: Scalar>() -> T {
    T::lit(1e-6).max(T::epsilon() * T::lit(1000.0))
}

pub fn check_unit<T: Scalar>(v: &[T]) -> Result<()> {
    let n = norm(v);
    if (n - T::one()).abs() > unit_tolerance::<T>() || !n.is_finite() {
        return Err(Error::NotNormalized(n.to_f64_lossy()));
    }
    Ok(())
}

/// Scale every pixel descriptor to unit Euclidean norm.
pub fn normalize_features<T: Scalar>(map: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let mut out = map.clone();
    for (i, px) in out.data.chunks_exact_mut(map.channels).enumerate() {
        let n = norm(px);
        if !(n.to_f64_lossy() >= 1e-12) {
            return Err(Error::Degenerate {
                pixel: i,
                norm: n.to_f64_lossy(),
            });
        }
        for v in px.iter_mut() {
            *v /= n;
        }
    }
    out.normalized = true;
    Ok(out)
}

/// Back-propagate through per-pixel normalization:
/// d(v/‖v‖) = (I − f fᵀ) dv / ‖v‖ with f the normalized vector.
pub fn normalize_backward<T: Scalar>(
    raw: &FeatureMap<T>,
    normalized: &FeatureMap<T>,
    grad_normalized: &[T],
) -> Vec<T> {
    let c = raw.channels;
    let mut out = vec![T::zero(); raw.data.len()];
    for (((g_out, v), f), g) in out
        .chunks_exact_mut(c)
        .zip(raw.data.chunks_exact(c))
        .zip(normalized.data.chunks_exact(c))
        .zip(grad_normalized.chunks_exact(c))
    {
        let n = norm(v);
        let proj: T = f.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for k in 0..c {
            g_out[k] = (g[k] - f[k] * proj) / n;
        }
    }
    out
}
