//! Per-pixel score maps, image-level aggregation and the classification loss.
//!
//! Score layout is pixel-major like [`FeatureMap`](super::FeatureMap): the
//! `C + 1` scores of pixel `i` are `scores[i * (C + 1)..][..C + 1]`, and the
//! last channel (index `C`) is background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{argmax, log_sum_exp, softmax, softmax_into, Scalar};

pub const DEFAULT_PIXEL_CUTOFF: f64 = 0.6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// image-level term only
    Pretrain,
    #[default]
    Full,
}

/// Maps raw pixel scores and their per-pixel softmax to C image-level scores.
pub trait ScoreAggregator<T: Scalar>: Send + Sync {
    /// `scores` and `probs` are pixel-major with `classes + 1` channels.
    fn aggregate(&self, scores: &[T], probs: &[T], classes: usize) -> Vec<T>;

    /// Returns (∂L/∂scores, ∂L/∂probs) given ∂L/∂y. Only the direct
    /// dependency on each input is included; the caller chains probs back
    /// through the softmax.
    fn backward(&self, scores: &[T], probs: &[T], classes: usize, grad_y: &[T])
        -> (Vec<T>, Vec<T>);
}

/// Normalized global weighted pooling plus a focal penalty on the mean mask:
/// y_c = Σ m·s / (ε + Σ m) + (1 − m̄)^γ · ln(λ + m̄), with m = probs[c].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NgwpFocal {
    pub eps: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub focal: bool,
}

impl Default for NgwpFocal {
    fn default() -> Self {
        Self {
            eps: 1.0,
            gamma: 3.0,
            lambda: 0.01,
            focal: true,
        }
    }
}

impl<T: Scalar> ScoreAggregator<T> for NgwpFocal {
    fn aggregate(&self, scores: &[T], probs: &[T], classes: usize) -> Vec<T> {
        let k = classes + 1;
        let npix = scores.len() / k;
        let eps = T::lit(self.eps);
        let mut num = vec![T::zero(); classes];
        let mut den = vec![eps; classes];
        for (s, m) in scores.chunks_exact(k).zip(probs.chunks_exact(k)) {
            for c in 0..classes {
                num[c] += m[c] * s[c];
                den[c] += m[c];
            }
        }
        (0..classes)
            .map(|c| {
                let mut y = num[c] / den[c];
                if self.focal {
                    let mbar = (den[c] - eps) / T::from_usize_lossy(npix);
                    y += focal_value(mbar, T::lit(self.gamma), T::lit(self.lambda));
                }
                y
            })
            .collect()
    }

    fn backward(
        &self,
        scores: &[T],
        probs: &[T],
        classes: usize,
        grad_y: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let k = classes + 1;
        let npix = scores.len() / k;
        let eps = T::lit(self.eps);
        let mut num = vec![T::zero(); classes];
        let mut den = vec![eps; classes];
        for (s, m) in scores.chunks_exact(k).zip(probs.chunks_exact(k)) {
            for c in 0..classes {
                num[c] += m[c] * s[c];
                den[c] += m[c];
            }
        }
        let pooled: Vec<T> = (0..classes).map(|c| num[c] / den[c]).collect();
        let focal_slope: Vec<T> = (0..classes)
            .map(|c| {
                if !self.focal {
                    return T::zero();
                }
                let mbar = (den[c] - eps) / T::from_usize_lossy(npix);
                focal_derivative(mbar, T::lit(self.gamma), T::lit(self.lambda))
                    / T::from_usize_lossy(npix)
            })
            .collect();
        let mut gs = vec![T::zero(); scores.len()];
        let mut gm = vec![T::zero(); probs.len()];
        for (i, (s, m)) in scores.chunks_exact(k).zip(probs.chunks_exact(k)).enumerate() {
            for c in 0..classes {
                gs[i * k + c] = grad_y[c] * m[c] / den[c];
                gm[i * k + c] = grad_y[c] * ((s[c] - pooled[c]) / den[c] + focal_slope[c]);
            }
        }
        (gs, gm)
    }
}

fn focal_value<T: Scalar>(mbar: T, gamma: T, lambda: T) -> T {
    (T::one() - mbar).powf(gamma) * (lambda + mbar).ln()
}

fn focal_derivative<T: Scalar>(mbar: T, gamma: T, lambda: T) -> T {
    let one_minus = T::one() - mbar;
    -gamma * one_minus.powf(gamma - T::one()) * (lambda + mbar).ln()
        + one_minus.powf(gamma) / (lambda + mbar)
}

/// Plain spatial mean of the raw class scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanPool;

impl<T: Scalar> ScoreAggregator<T> for MeanPool {
    fn aggregate(&self, scores: &[T], _probs: &[T], classes: usize) -> Vec<T> {
        let k = classes + 1;
        let npix = T::from_usize_lossy(scores.len() / k);
        let mut y = vec![T::zero(); classes];
        for s in scores.chunks_exact(k) {
            for c in 0..classes {
                y[c] += s[c];
            }
        }
        y.iter().map(|&v| v / npix).collect()
    }

    fn backward(
        &self,
        scores: &[T],
        probs: &[T],
        classes: usize,
        grad_y: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let k = classes + 1;
        let npix = T::from_usize_lossy(scores.len() / k);
        let mut gs = vec![T::zero(); scores.len()];
        for g in gs.chunks_exact_mut(k) {
            for c in 0..classes {
                g[c] = grad_y[c] / npix;
            }
        }
        (gs, vec![T::zero(); probs.len()])
    }
}

/// Config-level choice of aggregator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregator {
    NgwpFocal(NgwpFocal),
    MeanPool,
}

impl Default for Aggregator {
    fn default() -> Self {
        Aggregator::NgwpFocal(NgwpFocal::default())
    }
}

impl<T: Scalar> ScoreAggregator<T> for Aggregator {
    fn aggregate(&self, scores: &[T], probs: &[T], classes: usize) -> Vec<T> {
        match self {
            Aggregator::NgwpFocal(a) => a.aggregate(scores, probs, classes),
            Aggregator::MeanPool => MeanPool.aggregate(scores, probs, classes),
        }
    }

    fn backward(
        &self,
        scores: &[T],
        probs: &[T],
        classes: usize,
        grad_y: &[T],
    ) -> (Vec<T>, Vec<T>) {
        match self {
            Aggregator::NgwpFocal(a) => a.backward(scores, probs, classes, grad_y),
            Aggregator::MeanPool => MeanPool.backward(scores, probs, classes, grad_y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps<T> {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// raw head outputs, pixel-major, C + 1 channels
    pub scores: Vec<T>,
    /// per-pixel softmax of `scores`
    pub probs: Vec<T>,
    /// image-level scores, length C
    pub image: Vec<T>,
}

impl<T: Scalar> ScoreMaps<T> {
    pub fn from_scores(
        scores: Vec<T>,
        classes: usize,
        height: usize,
        width: usize,
        aggregator: &dyn ScoreAggregator<T>,
    ) -> Result<Self> {
        let k = classes + 1;
        if classes == 0 || scores.len() != k * height * width || height * width == 0 {
            return Err(Error::Dimension(format!(
                "score map has {} values, expected {k}x{height}x{width}",
                scores.len()
            )));
        }
        let mut probs = vec![T::zero(); scores.len()];
        for (s, p) in scores.chunks_exact(k).zip(probs.chunks_exact_mut(k)) {
            softmax_into(s, p);
        }
        let image = aggregator.aggregate(&scores, &probs, classes);
        Ok(Self {
            classes,
            height,
            width,
            scores,
            probs,
            image,
        })
    }

    pub fn background(&self) -> usize {
        self.classes
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel_probs(&self, i: usize) -> &[T] {
        let k = self.classes + 1;
        &self.probs[i * k..(i + 1) * k]
    }
}

/// −log softmax(y)[label]
pub fn image_cross_entropy<T: Scalar>(y: &[T], label: usize) -> T {
    log_sum_exp(y) - y[label]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationOutput<T> {
    pub image_loss: T,
    pub pixel_loss: T,
    pub loss: T,
    pub selected_pixels: usize,
    /// ∂loss/∂(raw scores), same layout as `ScoreMaps::scores`
    pub grad_scores: Vec<T>,
}

/// Image-level cross-entropy on the aggregated scores plus, in the full
/// phase, self-supervised pixel cross-entropy on confident pixels.
pub fn classification_loss<T: Scalar>(
    maps: &ScoreMaps<T>,
    labels: &[usize],
    phase: Phase,
    pixel_cutoff: T,
    aggregator: &dyn ScoreAggregator<T>,
) -> Result<ClassificationOutput<T>> {
    let label = match labels {
        [l] => *l,
        _ => {
            return Err(Error::invalid(format!(
                "classification needs exactly one label, got {}",
                labels.len()
            )))
        }
    };
    let c = maps.classes;
    if label >= c {
        return Err(Error::invalid(format!("label {label} out of range for {c} classes")));
    }
    let k = c + 1;

    let image_loss = image_cross_entropy(&maps.image, label);
    let mut grad_y = softmax(&maps.image);
    grad_y[label] -= T::one();
    let (mut grad_scores, grad_probs) =
        aggregator.backward(&maps.scores, &maps.probs, c, &grad_y);
    for ((g, q), gq) in grad_scores
        .chunks_exact_mut(k)
        .zip(maps.probs.chunks_exact(k))
        .zip(grad_probs.chunks_exact(k))
    {
        let inner: T = q.iter().zip(gq).map(|(&a, &b)| a * b).sum();
        for j in 0..k {
            g[j] += q[j] * (gq[j] - inner);
        }
    }

    let mut pixel_loss = T::zero();
    let mut selected = 0usize;
    if phase == Phase::Full {
        let chosen: Vec<(usize, usize)> = maps
            .probs
            .chunks_exact(k)
            .enumerate()
            .filter_map(|(i, q)| {
                let a = argmax(q);
                (q[a] > pixel_cutoff).then_some((i, a))
            })
            .collect();
        selected = chosen.len();
        if selected > 0 {
            let inv = T::one() / T::from_usize_lossy(selected);
            for &(i, a) in &chosen {
                let s = &maps.scores[i * k..(i + 1) * k];
                pixel_loss += log_sum_exp(s) - s[a];
                let q = &maps.probs[i * k..(i + 1) * k];
                for j in 0..k {
                    let target = if j == a { T::one() } else { T::zero() };
                    grad_scores[i * k + j] += (q[j] - target) * inv;
                }
            }
            pixel_loss *= inv;
        }
    }

    Ok(ClassificationOutput {
        image_loss,
        pixel_loss,
        loss: image_loss + pixel_loss,
        selected_pixels: selected,
        grad_scores,
    })
}
