//! Contrastive training data from point tracks: image pairs, positive pixel
//! correspondences, inter-/intra-image negatives, batch composition, and
//! overlap-based caption transfer for retrieval training.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ImageDoc};
use crate::error::{Error, Result};
use crate::ids::{ImageId, PointKey};
use crate::sfm::TrackIndex;

pub const PAIRS_PER_BATCH: usize = 16;
pub const REAL_PAIRS_PER_BATCH: usize = 8;
pub const DEFAULT_POSITIVES_PER_PAIR: usize = 8;
pub const DEFAULT_NEGATIVES: usize = 16;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;

/// Cell of a feature grid, (column, row).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridPixel {
    pub x: u32,
    pub y: u32,
}

/// Map a pixel position at `image` resolution onto a `grid` of cells by
/// proportional scaling, truncating toward zero and clamping to the grid.
pub fn to_grid(xy: [f64; 2], image: (u32, u32), grid: (u32, u32)) -> GridPixel {
    let scale = |v: f64, full: u32, cells: u32| -> u32 {
        let c = (v * cells as f64 / full as f64).trunc();
        if c <= 0.0 {
            0
        } else {
            (c as u32).min(cells.saturating_sub(1))
        }
    };
    GridPixel {
        x: scale(xy[0], image.0, grid.0),
        y: scale(xy[1], image.1, grid.1),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePair {
    pub image_a: ImageId,
    pub image_b: ImageId,
    pub shared_point_ids: Vec<PointKey>,
}

/// Positive correspondence at original image resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub point: PointKey,
    /// Pixel in image A.
    pub p: [f64; 2],
    /// Pixel in image B.
    pub p_plus: [f64; 2],
}

impl ImagePair {
    /// All correspondences of the pair, materialized on demand.
    pub fn correspondences(&self, index: &TrackIndex) -> Result<Vec<Correspondence>> {
        self.shared_point_ids
            .iter()
            .map(|&k| self.correspondence(index, k))
            .collect()
    }

    fn correspondence(&self, index: &TrackIndex, k: PointKey) -> Result<Correspondence> {
        let p = index
            .pixel(k, &self.image_a)
            .ok_or_else(|| Error::Consistency(format!("{} does not observe {k:?}", self.image_a)))?;
        let p_plus = index
            .pixel(k, &self.image_b)
            .ok_or_else(|| Error::Consistency(format!("{} does not observe {k:?}", self.image_b)))?;
        Ok(Correspondence { point: k, p, p_plus })
    }
}

/// Unordered pairs of `eligible` images sharing at least `min_shared`
/// keypoints, sorted by (image_a, image_b) with image_a < image_b.
pub fn enumerate_pairs(
    index: &TrackIndex,
    eligible: &BTreeSet<ImageId>,
    min_shared: usize,
) -> Result<Vec<ImagePair>> {
    let min_shared = min_shared.max(1);
    let mut out = Vec::new();
    for ((a, b), n) in index.pairs() {
        if a == b || n < min_shared || !eligible.contains(a) || !eligible.contains(b) {
            continue;
        }
        out.push(ImagePair {
            image_a: a.clone(),
            image_b: b.clone(),
            shared_point_ids: index.shared_points(a, b)?,
        });
    }
    Ok(out)
}

/// `n` correspondences drawn uniformly with replacement from the pair's
/// shared points.
pub fn sample_correspondences(
    index: &TrackIndex,
    pair: &ImagePair,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Correspondence>> {
    if pair.shared_point_ids.is_empty() {
        return Err(Error::Insufficient(format!(
            "pair ({}, {}) has no shared points",
            pair.image_a, pair.image_b
        )));
    }
    (0..n)
        .map(|_| {
            let k = pair.shared_point_ids[rng.gen_range(0..pair.shared_point_ids.len())];
            pair.correspondence(index, k)
        })
        .collect()
}

/// A batch member as seen by the negative sampler.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchImage {
    pub id: ImageId,
    /// Feature grid (width, height).
    pub grid: (u32, u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Negative {
    pub image: ImageId,
    pub pixel: GridPixel,
}

/// `m` negatives: a uniformly chosen batch image other than the anchor pair's
/// two images, then a uniform cell of its grid.
pub fn sample_negatives_inter(
    batch: &[BatchImage],
    anchor: (&ImageId, &ImageId),
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Negative>> {
    if batch.len() < 3 {
        return Err(Error::Insufficient(format!(
            "inter-image negatives need a batch of at least 3 images, got {}",
            batch.len()
        )));
    }
    let others: Vec<&BatchImage> = batch
        .iter()
        .filter(|b| &b.id != anchor.0 && &b.id != anchor.1)
        .collect();
    if others.is_empty() && m > 0 {
        return Err(Error::Insufficient("no batch image outside the anchor pair".into()));
    }
    Ok((0..m)
        .map(|_| {
            let img = others[rng.gen_range(0..others.len())];
            Negative {
                image: img.id.clone(),
                pixel: GridPixel {
                    x: rng.gen_range(0..img.grid.0),
                    y: rng.gen_range(0..img.grid.1),
                },
            }
        })
        .collect())
}

/// Whether `q` lies outside the w/4 × h/4 box centred on `p_plus`.
pub fn outside_exclusion_box(q: GridPixel, p_plus: GridPixel, w: u32, h: u32) -> bool {
    let dx = (q.x as f64 - p_plus.x as f64).abs();
    let dy = (q.y as f64 - p_plus.y as f64).abs();
    dx > w as f64 / 8.0 || dy > h as f64 / 8.0
}

/// `m` cells uniform over the `w × h` grid minus the exclusion box around
/// `p_plus`.
pub fn sample_negatives_intra(
    p_plus: GridPixel,
    m: usize,
    w: u32,
    h: u32,
    rng: &mut impl Rng,
) -> Result<Vec<GridPixel>> {
    let admissible: Vec<GridPixel> = (0..h)
        .flat_map(|y| (0..w).map(move |x| GridPixel { x, y }))
        .filter(|&q| outside_exclusion_box(q, p_plus, w, h))
        .collect();
    if admissible.is_empty() {
        return Err(Error::invalid(format!(
            "exclusion box around ({}, {}) covers the whole {w}x{h} grid",
            p_plus.x, p_plus.y
        )));
    }
    Ok((0..m)
        .map(|_| admissible[rng.gen_range(0..admissible.len())])
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// From other images of the batch.
    #[default]
    Inter,
    /// From the second image, away from the positive.
    Intra,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSampling {
    pub positives_per_pair: usize,
    pub negatives: usize,
    pub strategy: NegativeSampling,
    /// Feature-grid stride relative to image resolution.
    pub stride: u32,
}

impl Default for BatchSampling {
    fn default() -> Self {
        Self {
            positives_per_pair: DEFAULT_POSITIVES_PER_PAIR,
            negatives: DEFAULT_NEGATIVES,
            strategy: NegativeSampling::Inter,
            stride: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Positive {
    pub correspondence: Correspondence,
    /// `p` on A's feature grid.
    pub p_cell: GridPixel,
    /// `p_plus` on B's feature grid.
    pub p_plus_cell: GridPixel,
    pub negatives: Vec<Negative>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPair {
    pub image_a: ImageId,
    pub image_b: ImageId,
    /// Pairs with shared keypoints; pseudo-pairs of unrelated singles carry
    /// no positives and only feed the classification loss.
    pub real: bool,
    pub positives: Vec<Positive>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub pairs: Vec<BatchPair>,
}

impl Batch {
    pub fn images(&self) -> impl Iterator<Item = &ImageId> {
        self.pairs.iter().flat_map(|p| [&p.image_a, &p.image_b])
    }

    pub fn num_real(&self) -> usize {
        self.pairs.iter().filter(|p| p.real).count()
    }
}

/// Eight distinct real pairs plus eight pseudo-pairs made of sixteen distinct
/// singles, with positives and negatives sampled for the real pairs.
/// `size_of` gives an image's (width, height) at original resolution.
pub fn compose_batch(
    index: &TrackIndex,
    real_pairs: &[ImagePair],
    singles: &[ImageId],
    sampling: &BatchSampling,
    size_of: &dyn Fn(&ImageId) -> (u32, u32),
    rng: &mut impl Rng,
) -> Result<Batch> {
    let pseudo_needed = 2 * (PAIRS_PER_BATCH - REAL_PAIRS_PER_BATCH);
    if real_pairs.len() < REAL_PAIRS_PER_BATCH {
        return Err(Error::Insufficient(format!(
            "need {REAL_PAIRS_PER_BATCH} real pairs, {} available (short by {})",
            real_pairs.len(),
            REAL_PAIRS_PER_BATCH - real_pairs.len()
        )));
    }
    if singles.len() < pseudo_needed {
        return Err(Error::Insufficient(format!(
            "need {pseudo_needed} single images, {} available (short by {})",
            singles.len(),
            pseudo_needed - singles.len()
        )));
    }
    if sampling.stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let grid_of = |id: &ImageId| {
        let (w, h) = size_of(id);
        (w / sampling.stride, h / sampling.stride)
    };

    let chosen: Vec<&ImagePair> = real_pairs
        .choose_multiple(rng, REAL_PAIRS_PER_BATCH)
        .collect();
    let picked: Vec<&ImageId> = singles.choose_multiple(rng, pseudo_needed).collect();

    let mut pairs: Vec<BatchPair> = chosen
        .iter()
        .map(|p| BatchPair {
            image_a: p.image_a.clone(),
            image_b: p.image_b.clone(),
            real: true,
            positives: Vec::new(),
        })
        .collect();
    pairs.extend(picked.chunks(2).map(|c| BatchPair {
        image_a: c[0].clone(),
        image_b: c[1].clone(),
        real: false,
        positives: Vec::new(),
    }));

    let members: Vec<BatchImage> = pairs
        .iter()
        .flat_map(|p| [&p.image_a, &p.image_b])
        .map(|id| BatchImage {
            id: id.clone(),
            grid: grid_of(id),
        })
        .collect();

    for (bp, src) in pairs.iter_mut().zip(&chosen) {
        let (size_a, size_b) = (size_of(&bp.image_a), size_of(&bp.image_b));
        let (grid_a, grid_b) = (grid_of(&bp.image_a), grid_of(&bp.image_b));
        for c in sample_correspondences(index, src, sampling.positives_per_pair, rng)? {
            let p_cell = to_grid(c.p, size_a, grid_a);
            let p_plus_cell = to_grid(c.p_plus, size_b, grid_b);
            let negatives = match sampling.strategy {
                NegativeSampling::Inter => sample_negatives_inter(
                    &members,
                    (&bp.image_a, &bp.image_b),
                    sampling.negatives,
                    rng,
                )?,
                NegativeSampling::Intra => {
                    sample_negatives_intra(p_plus_cell, sampling.negatives, grid_b.0, grid_b.1, rng)?
                        .into_iter()
                        .map(|pixel| Negative {
                            image: bp.image_b.clone(),
                            pixel,
                        })
                        .collect()
                }
            };
            bp.positives.push(Positive {
                correspondence: c,
                p_cell,
                p_plus_cell,
                negatives,
            });
        }
    }
    Ok(Batch { pairs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Transferred { from: ImageId, iou: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedCaptionPair {
    pub image_id: ImageId,
    pub caption: String,
    pub provenance: Provenance,
}

/// Corpus record extended with provenance, as written by `augment`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    #[serde(flatten)]
    pub doc: ImageDoc,
    pub provenance: Provenance,
}

fn iou_reaches(index: &TrackIndex, donor: &ImageId, receiver: &ImageId, threshold: f64) -> Result<Option<f64>> {
    let iou = index.keypoint_iou(donor, receiver)?;
    Ok((iou >= threshold).then_some(iou))
}

/// Original caption pairs plus captions transferred from each captioned
/// donor to every other indexed image whose keypoint IoU with it reaches
/// `threshold`. Exact (image, caption) duplicates are dropped, first wins.
pub fn augment_caption_pairs(
    corpus: &Corpus,
    index: &TrackIndex,
    threshold: f64,
) -> Result<Vec<AugmentedCaptionPair>> {
    let mut out = Vec::new();
    let mut seen: BTreeSet<(ImageId, String)> = BTreeSet::new();
    for d in corpus.docs() {
        if d.caption.trim().is_empty() {
            continue;
        }
        if seen.insert((d.image_id.clone(), d.caption.clone())) {
            out.push(AugmentedCaptionPair {
                image_id: d.image_id.clone(),
                caption: d.caption.clone(),
                provenance: Provenance::Original,
            });
        }
    }

    // Candidate receivers: pairs with overlap, or every pair when a
    // non-positive threshold admits zero overlap.
    let mut candidates: Vec<(ImageId, ImageId)> = Vec::new();
    if threshold > 0.0 {
        for ((a, b), _) in index.pairs() {
            candidates.push((a.clone(), b.clone()));
            candidates.push((b.clone(), a.clone()));
        }
    } else {
        for a in index.images() {
            for b in index.images() {
                if a != b {
                    candidates.push((a.clone(), b.clone()));
                }
            }
        }
    }
    candidates.sort();

    for (donor, receiver) in candidates {
        let Some(doc) = corpus.get(&donor) else { continue };
        if doc.caption.trim().is_empty() || corpus.get(&receiver).is_none() {
            continue;
        }
        if let Some(iou) = iou_reaches(index, &donor, &receiver, threshold)? {
            if seen.insert((receiver.clone(), doc.caption.clone())) {
                out.push(AugmentedCaptionPair {
                    image_id: receiver,
                    caption: doc.caption.clone(),
                    provenance: Provenance::Transferred { from: donor, iou },
                });
            }
        }
    }
    Ok(out)
}

/// Augmented pairs in corpus-record form, ready for `write_jsonl_string`.
pub fn to_augmented_records(
    corpus: &Corpus,
    pairs: &[AugmentedCaptionPair],
) -> Result<Vec<AugmentedRecord>> {
    pairs
        .iter()
        .map(|p| {
            let mut doc = corpus
                .get(&p.image_id)
                .cloned()
                .ok_or_else(|| Error::UnknownImage(p.image_id.to_string()))?;
            doc.caption = p.caption.clone();
            Ok(AugmentedRecord {
                doc,
                provenance: p.provenance.clone(),
            })
        })
        .collect()
}
