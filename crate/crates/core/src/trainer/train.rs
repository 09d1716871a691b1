use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{AugmentConfig, Augmentation};
use super::model::{ForwardCache, ToyModel, STRIDE};
use super::optim::{Adam, TrainSchedule};
use crate::error::{Error, Result};
use crate::ids::ImageId;
use crate::numerics::{
    classification_loss, mse_loss, nce_loss, triplet_loss, LossConfig, LossVariant,
};
use crate::pairs::{
    compose_batch, to_grid, BatchSampling, GridPixel, ImagePair, NegativeSampling,
    DEFAULT_POSITIVES_PER_PAIR,
};
use crate::raster::Raster;
use crate::rng::stage_rng;
use crate::scalar::Scalar;
use crate::sfm::TrackIndex;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub positives_per_pair: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        self.augment.validate()
    }

    /// Batch sampling implied by the loss variant.
    pub fn sampling(&self) -> BatchSampling {
        let strategy = match self.loss.variant {
            LossVariant::NceIntra => NegativeSampling::Intra,
            _ => NegativeSampling::Inter,
        };
        let negatives = match self.loss.variant {
            LossVariant::Mse => 0,
            _ => self.loss.negatives,
        };
        BatchSampling {
            positives_per_pair: self.positives_per_pair.unwrap_or(DEFAULT_POSITIVES_PER_PAIR),
            negatives,
            strategy,
            stride: STRIDE as u32,
        }
    }
}

/// Everything the loop samples from. Every image named by a pair or single
/// must have pixels and a class label.
pub struct TrainingData<'a, T> {
    pub index: &'a TrackIndex,
    pub images: &'a BTreeMap<ImageId, Raster<T>>,
    pub labels: &'a BTreeMap<ImageId, usize>,
    pub real_pairs: &'a [ImagePair],
    pub singles: &'a [ImageId],
}

impl<T: Scalar> TrainingData<'_, T> {
    fn check(&self) -> Result<()> {
        let ids = self
            .real_pairs
            .iter()
            .flat_map(|p| [&p.image_a, &p.image_b])
            .chain(self.singles.iter());
        for id in ids {
            if !self.images.contains_key(id) {
                return Err(Error::UnknownImage(id.to_string()));
            }
            if !self.labels.contains_key(id) {
                return Err(Error::invalid(format!("training image {id} has no label")));
            }
        }
        Ok(())
    }

    fn size_of(&self, id: &ImageId) -> (u32, u32) {
        self.images
            .get(id)
            .map(|r| (r.width as u32, r.height as u32))
            .unwrap_or((0, 0))
    }
}

/// One line of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub l_cls_im: f64,
    pub l_cls_pix: f64,
    pub l_3d: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: ToyModel<T>,
    pub trace: Vec<TraceRecord>,
}

/// A 3D term between two batch instances after augmentation.
struct Term {
    pair: usize,
    a: (usize, GridPixel),
    b: (usize, GridPixel),
    negatives: Vec<(usize, GridPixel)>,
}

fn cell_index(cache: &ForwardCache<impl Scalar>, c: GridPixel) -> usize {
    c.y as usize * cache.features.width + c.x as usize
}

/// Run the full schedule. Deterministic given `seed` whatever the thread
/// count: all draws happen on the calling thread and per-image gradients are
/// summed in batch order.
pub fn train<T: Scalar>(
    mut model: ToyModel<T>,
    data: &TrainingData<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    data.check()?;
    let sampling = cfg.sampling();
    let mut batch_rng = stage_rng(seed, "train/batches");
    let mut aug_rng = stage_rng(seed, "train/augment");
    let mut opt = Adam::new(model.params.len(), &cfg.schedule);
    let loss_cfg = &cfg.loss;
    let (tau, lambda) = (T::lit(loss_cfg.tau), T::lit(loss_cfg.lambda));
    let cutoff = T::lit(loss_cfg.pixel_cutoff);
    let margin = T::lit(loss_cfg.margin);
    let mut trace = Vec::with_capacity(cfg.schedule.total_steps());
    let size_of = |id: &ImageId| data.size_of(id);

    for epoch in 0..cfg.schedule.epochs {
        let lr = T::lit(cfg.schedule.lr_at_epoch(epoch));
        let phase = cfg.schedule.phase_at_epoch(epoch);
        for _ in 0..cfg.schedule.steps_per_epoch {
            let step = trace.len();
            let batch = compose_batch(
                data.index,
                data.real_pairs,
                data.singles,
                &sampling,
                &size_of,
                &mut batch_rng,
            )?;

            // instances 2i and 2i + 1 are the two sides of batch pair i
            let mut augs = Vec::with_capacity(2 * batch.pairs.len());
            let mut inputs = Vec::with_capacity(2 * batch.pairs.len());
            for id in batch.images() {
                let img = &data.images[id];
                let aug = Augmentation::sample(&cfg.augment, img.width, img.height, &mut aug_rng);
                inputs.push(aug.apply(img));
                augs.push(aug);
            }
            let mut first_instance: BTreeMap<&ImageId, usize> = BTreeMap::new();
            for (i, id) in batch.images().enumerate() {
                first_instance.entry(id).or_insert(i);
            }

            let mut terms = Vec::new();
            for (pi, bp) in batch.pairs.iter().enumerate() {
                let (ia, ib) = (2 * pi, 2 * pi + 1);
                let (ra, rb) = (&inputs[ia], &inputs[ib]);
                let grid_a = ((ra.width / STRIDE) as u32, (ra.height / STRIDE) as u32);
                let grid_b = ((rb.width / STRIDE) as u32, (rb.height / STRIDE) as u32);
                for pos in &bp.positives {
                    let c = &pos.correspondence;
                    let (Some(pa), Some(pb)) =
                        (augs[ia].crop.map_point(c.p), augs[ib].crop.map_point(c.p_plus))
                    else {
                        continue;
                    };
                    let negatives = pos
                        .negatives
                        .iter()
                        .map(|n| {
                            let inst = match sampling.strategy {
                                NegativeSampling::Intra => ib,
                                NegativeSampling::Inter => first_instance[&n.image],
                            };
                            (inst, n.pixel)
                        })
                        .collect();
                    terms.push(Term {
                        pair: pi,
                        a: (ia, to_grid(pa, (ra.width as u32, ra.height as u32), grid_a)),
                        b: (ib, to_grid(pb, (rb.width as u32, rb.height as u32), grid_b)),
                        negatives,
                    });
                }
            }

            let caches: Vec<ForwardCache<T>> = inputs
                .par_iter()
                .map(|img| model.forward_cached(img))
                .collect::<Result<_>>()?;

            let n_pairs = T::from_usize_lossy(batch.pairs.len());
            let ids: Vec<&ImageId> = batch.images().collect();
            let mut grad_scores = Vec::with_capacity(caches.len());
            let (mut sum_im, mut sum_pix) = (T::zero(), T::zero());
            for (cache, id) in caches.iter().zip(&ids) {
                let out = classification_loss(
                    &cache.maps,
                    &[data.labels[*id]],
                    phase,
                    cutoff,
                    &model.config.aggregator,
                )?;
                sum_im += out.image_loss;
                sum_pix += out.pixel_loss;
                grad_scores.push(out.grad_scores.into_iter().map(|g| g / n_pairs).collect::<Vec<T>>());
            }

            let mut grad_features: Vec<Vec<T>> =
                caches.iter().map(|c| vec![T::zero(); c.features.data.len()]).collect();
            let mut per_pair = vec![0usize; batch.pairs.len()];
            for t in &terms {
                per_pair[t.pair] += 1;
            }
            let k = model.config.feature_dim;
            let mut pair_sums = vec![T::zero(); batch.pairs.len()];
            let feat = |inst: usize, cell: GridPixel| {
                let i = cell_index(&caches[inst], cell);
                &caches[inst].features.data[i * k..(i + 1) * k]
            };
            for t in &terms {
                let scale = lambda / (T::from_usize_lossy(per_pair[t.pair]) * n_pairs);
                let (fa, fb) = (feat(t.a.0, t.a.1), feat(t.b.0, t.b.1));
                let mut add = |inst: usize, cell: GridPixel, g: &[T]| {
                    let i = cell_index(&caches[inst], cell);
                    for (d, &v) in grad_features[inst][i * k..(i + 1) * k].iter_mut().zip(g) {
                        *d += scale * v;
                    }
                };
                match loss_cfg.variant {
                    LossVariant::NceInter | LossVariant::NceIntra => {
                        let negs: Vec<&[T]> = t.negatives.iter().map(|&(i, c)| feat(i, c)).collect();
                        let out = nce_loss(fa, fb, &negs, tau)?;
                        pair_sums[t.pair] += out.loss;
                        add(t.a.0, t.a.1, &out.grad_p);
                        add(t.b.0, t.b.1, &out.grad_p_plus);
                        for (&(i, c), g) in t.negatives.iter().zip(&out.grad_negatives) {
                            add(i, c, g);
                        }
                    }
                    LossVariant::Mse => {
                        let out = mse_loss(fa, fb)?;
                        pair_sums[t.pair] += out.loss;
                        add(t.a.0, t.a.1, &out.grad_p);
                        add(t.b.0, t.b.1, &out.grad_p_plus);
                    }
                    LossVariant::Triplet => {
                        let inv = T::one() / T::from_usize_lossy(t.negatives.len().max(1));
                        let mut loss = T::zero();
                        for &(i, c) in &t.negatives {
                            let out = triplet_loss(fa, fb, feat(i, c), margin, loss_cfg.triplet_form)?;
                            loss += out.loss * inv;
                            let sc = |g: &[T]| g.iter().map(|&v| v * inv).collect::<Vec<T>>();
                            add(t.a.0, t.a.1, &sc(&out.grad_p));
                            add(t.b.0, t.b.1, &sc(&out.grad_p_plus));
                            add(i, c, &sc(&out.grad_p_minus));
                        }
                        pair_sums[t.pair] += loss;
                    }
                }
            }

            // batch objective: mean over pairs of L_cls(a) + L_cls(b) + λ·mean L_3D
            let pair_3d: T = pair_sums
                .iter()
                .zip(&per_pair)
                .filter(|(_, &n)| n > 0)
                .map(|(&s, &n)| s / T::from_usize_lossy(n))
                .sum();
            let mean_3d = if terms.is_empty() {
                T::zero()
            } else {
                pair_sums.iter().copied().sum::<T>() / T::from_usize_lossy(terms.len())
            };
            let n_inst = T::from_usize_lossy(caches.len());
            let total = (sum_im + sum_pix + lambda * pair_3d) / n_pairs;

            let record = TraceRecord {
                step,
                l_cls_im: (sum_im / n_inst).to_f64_lossy(),
                l_cls_pix: (sum_pix / n_inst).to_f64_lossy(),
                l_3d: mean_3d.to_f64_lossy(),
                total: total.to_f64_lossy(),
            };
            if ![record.l_cls_im, record.l_cls_pix, record.l_3d, record.total]
                .iter()
                .all(|v| v.is_finite())
            {
                let pnorm: f64 = model.params.iter().map(|p| p.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
                return Err(Error::NonFinite(format!(
                    "training diverged: {} | epoch {epoch} lr {} parameter norm {pnorm}",
                    serde_json::to_string(&record)?,
                    lr
                )));
            }

            let grads: Vec<Vec<T>> = caches
                .par_iter()
                .zip(grad_scores.par_iter())
                .zip(grad_features.par_iter())
                .map(|((c, gs), gf)| model.backward(c, gs, Some(gf)))
                .collect();
            let mut grad = vec![T::zero(); model.params.len()];
            for g in &grads {
                for (a, &b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            opt.step(&mut model.params, &grad, lr);
            trace.push(record);
        }
        if let Some(last) = trace.last() {
            log::debug!("epoch {epoch}: {:?}", last);
        }
    }
    Ok(TrainOutcome { model, trace })
}

/// Mean cosine similarity of descriptors at every shared point of `pairs`,
/// on unaugmented images.
pub fn mean_correspondence_cosine<T: Scalar>(
    model: &ToyModel<T>,
    images: &BTreeMap<ImageId, Raster<T>>,
    index: &TrackIndex,
    pairs: &[ImagePair],
) -> Result<f64> {
    let mut needed: Vec<&ImageId> = pairs.iter().flat_map(|p| [&p.image_a, &p.image_b]).collect();
    needed.sort();
    needed.dedup();
    let feats: BTreeMap<&ImageId, _> = needed
        .par_iter()
        .map(|id| {
            let img = images.get(*id).ok_or_else(|| Error::UnknownImage(id.to_string()))?;
            Ok((*id, model.features(img)?))
        })
        .collect::<Result<_>>()?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for pair in pairs {
        let (fa, fb) = (&feats[&pair.image_a], &feats[&pair.image_b]);
        let size = |id: &ImageId| {
            let r = &images[id];
            (r.width as u32, r.height as u32)
        };
        for c in pair.correspondences(index)? {
            let ca = to_grid(c.p, size(&pair.image_a), (fa.width as u32, fa.height as u32));
            let cb = to_grid(c.p_plus, size(&pair.image_b), (fb.width as u32, fb.height as u32));
            let a = fa.pixel(ca.x as usize, ca.y as usize);
            let b = fb.pixel(cb.x as usize, cb.y as usize);
            sum += a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>().to_f64_lossy();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Insufficient("no correspondences to evaluate".into()));
    }
    Ok(sum / n as f64)
}
