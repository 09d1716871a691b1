//! End-to-end toy run on a synthetic fixture: label, train, fuse held-out
//! reconstructions, and score them. Used to compare the 3D loss weight.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::NounTagger;
use crate::error::{Error, Result};
use crate::evaluation::{classification_report, mean_seg_metrics, SegMetrics};
use crate::fusion::{delta, fuse_reconstruction, theta, ConceptPolarity, ScoredCloud, DEFAULT_PHI, STRICT_PHI};
use crate::ids::{ImageId, LandmarkId};
use crate::numerics::Aggregator;
use crate::labeling::{label_corpus, ConnectorList};
use crate::pairs::{enumerate_pairs, ImagePair};
use crate::raster::Raster;
use crate::rng::{derive_seed, stage_rng};
use crate::scalar::Scalar;
use crate::sfm::{build_track_index, TrackIndex};
use crate::synth::{generate, Fixture, SceneSpec};
use crate::trainer::{
    image_label, mean_correspondence_cosine, segment_2d, train, ModelConfig, ToyModel, TraceRecord,
    TrainConfig, TrainSchedule, TrainingData, DEFAULT_BACKGROUND_POWER,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyExperiment {
    pub scene: SceneSpec,
    /// Landmarks after this many are held out entirely.
    pub train_landmarks: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Minimum shared keypoints for a training or evaluation pair.
    pub min_shared: usize,
}

impl Default for ToyExperiment {
    fn default() -> Self {
        let scene = SceneSpec {
            landmarks: 16,
            concepts: ["facade", "portal", "nave", "altar"].map(String::from).to_vec(),
            cameras_per_region: 4,
            filler_regions: 4,
            outlier_nouns: vec![],
            check_separation: false,
            nuisance: 0.3,
            ..SceneSpec::default()
        };
        let schedule = TrainSchedule {
            epochs: 20,
            steps_per_epoch: 20,
            decay_epochs: vec![14, 18],
            pretrain_epochs: 3,
            learning_rate: 1e-2,
            ..TrainSchedule::default()
        };
        Self {
            model: ModelConfig {
                classes: scene.concepts.len(),
                // nGWP pseudo labels collapse to background on this small fixture
                aggregator: Aggregator::MeanPool,
                ..ModelConfig::default()
            },
            scene,
            train_landmarks: 12,
            train: TrainConfig {
                schedule,
                ..TrainConfig::default()
            },
            min_shared: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub seed: u64,
    pub lambda: f64,
    pub theta_05: f64,
    pub theta_075: f64,
    /// Absent when no held-out reconstruction has a polarized point.
    pub delta_05: Option<f64>,
    pub delta_075: Option<f64>,
    pub heldout_cosine: f64,
    pub map: f64,
    pub map_pooled: f64,
    pub seg: SegMetrics,
    pub last_step: Option<TraceRecord>,
}

/// Fixture, index and label assignment shared by every run of one seed.
pub struct Prepared<T> {
    pub fixture: Fixture,
    pub index: TrackIndex,
    pub classes: Vec<String>,
    pub labels: BTreeMap<ImageId, usize>,
    pub images: BTreeMap<ImageId, Raster<T>>,
    pub train_pairs: Vec<ImagePair>,
    pub train_singles: Vec<ImageId>,
    pub heldout: BTreeSet<LandmarkId>,
}

impl ToyExperiment {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        if self.model.classes != self.scene.concepts.len() {
            return Err(Error::invalid(format!(
                "model has {} classes for {} planted concepts",
                self.model.classes,
                self.scene.concepts.len()
            )));
        }
        if self.train_landmarks == 0 || self.train_landmarks >= self.scene.landmarks {
            return Err(Error::invalid(
                "train_landmarks must leave at least one landmark on each side",
            ));
        }
        Ok(())
    }

    pub fn prepare<T: Scalar>(&self, seed: u64) -> Result<Prepared<T>> {
        self.validate()?;
        let scene = SceneSpec {
            seed: derive_seed(seed, "experiment/scene"),
            ..self.scene.clone()
        };
        let fixture = generate(&scene)?;
        let index = build_track_index(&fixture.reconstructions)?;
        let classes = scene.concepts.clone();
        let concept_set: BTreeSet<String> = classes.iter().cloned().collect();
        let tagger: &dyn NounTagger = &fixture.lexicon;
        let labels: BTreeMap<ImageId, usize> =
            label_corpus(&fixture.corpus, &concept_set, tagger, &ConnectorList::default())
                .into_iter()
                .filter(|(id, c)| c.len() == 1 && index.contains(id))
                .map(|(id, c)| {
                    let name = c.into_iter().next().unwrap_or_default();
                    let k = classes.iter().position(|x| *x == name).unwrap_or(0);
                    (id, k)
                })
                .collect();

        let landmarks: Vec<LandmarkId> = fixture.corpus.landmarks().into_iter().cloned().collect();
        let heldout: BTreeSet<LandmarkId> = landmarks[self.train_landmarks..].iter().cloned().collect();
        let is_train = |id: &ImageId| {
            fixture
                .corpus
                .get(id)
                .is_some_and(|d| !heldout.contains(&d.landmark_id))
        };
        let train_singles: Vec<ImageId> = labels.keys().filter(|id| is_train(id)).cloned().collect();
        let eligible: BTreeSet<ImageId> = train_singles.iter().cloned().collect();
        let train_pairs = enumerate_pairs(&index, &eligible, self.min_shared)?;

        let needed: BTreeSet<&ImageId> = train_singles
            .iter()
            .chain(index.images().iter().filter(|id| !is_train(id)))
            .collect();
        let images = needed
            .into_iter()
            .map(|id| Ok((id.clone(), fixture.render::<T>(id)?)))
            .collect::<Result<_>>()?;
        Ok(Prepared {
            fixture,
            index,
            classes,
            labels,
            images,
            train_pairs,
            train_singles,
            heldout,
        })
    }

    pub fn train_model<T: Scalar>(
        &self,
        prep: &Prepared<T>,
        seed: u64,
        lambda: f64,
    ) -> Result<(ToyModel<T>, Vec<TraceRecord>)> {
        let mut cfg = self.train.clone();
        cfg.loss.lambda = lambda;
        let model = ToyModel::init(self.model.clone(), &mut stage_rng(seed, "experiment/init"))?;
        let data = TrainingData {
            index: &prep.index,
            images: &prep.images,
            labels: &prep.labels,
            real_pairs: &prep.train_pairs,
            singles: &prep.train_singles,
        };
        let out = train(model, &data, &cfg, derive_seed(seed, "experiment/train"))?;
        Ok((out.model, out.trace))
    }

    /// Score clouds of the held-out reconstructions.
    pub fn heldout_clouds<T: Scalar>(
        &self,
        prep: &Prepared<T>,
        model: &ToyModel<T>,
    ) -> Result<Vec<ScoredCloud<T>>> {
        prep.fixture
            .reconstructions
            .iter()
            .filter(|r| prep.heldout.contains(&r.landmark_id))
            .map(|r| fuse_reconstruction(model, r, &prep.images, &prep.classes, DEFAULT_PHI))
            .collect()
    }

    pub fn evaluate<T: Scalar>(
        &self,
        prep: &Prepared<T>,
        model: &ToyModel<T>,
        seed: u64,
        lambda: f64,
        trace: &[TraceRecord],
    ) -> Result<ToyReport> {
        let clouds = self.heldout_clouds(prep, model)?;
        let polarity = ConceptPolarity::reference();

        let heldout_ids: BTreeSet<ImageId> = prep
            .index
            .images()
            .iter()
            .filter(|id| {
                prep.fixture
                    .corpus
                    .get(id)
                    .is_some_and(|d| prep.heldout.contains(&d.landmark_id))
            })
            .cloned()
            .collect();
        let pairs = enumerate_pairs(&prep.index, &heldout_ids, self.min_shared)?;
        let cosine = mean_correspondence_cosine(model, &prep.images, &prep.index, &pairs)?;

        // 2D metrics on held-out labeled images
        let mut ids = Vec::new();
        let mut scores = Vec::new();
        let mut truth = Vec::new();
        let mut masks = Vec::new();
        for id in heldout_ids.iter().filter(|id| prep.labels.contains_key(*id)) {
            let (_, maps) = model.forward(&prep.images[id])?;
            let label = image_label(&maps);
            let pred = segment_2d(&maps, label, DEFAULT_BACKGROUND_POWER);
            let gt = prep.fixture.mask(id)?.downsample(crate::trainer::STRIDE);
            masks.push((pred, gt));
            ids.push(id.clone());
            scores.push(maps.image.iter().map(|v| v.to_f64_lossy()).collect());
            truth.push(BTreeSet::from([prep.labels[id]]));
        }
        let cls = classification_report(&prep.classes, &ids, &scores, &truth)?;
        Ok(ToyReport {
            seed,
            lambda,
            theta_05: theta(&clouds, DEFAULT_PHI)?,
            theta_075: theta(&clouds, STRICT_PHI)?,
            delta_05: delta(&clouds, &polarity, DEFAULT_PHI).ok(),
            delta_075: delta(&clouds, &polarity, STRICT_PHI).ok(),
            heldout_cosine: cosine,
            map: cls.map,
            map_pooled: cls.map_pooled,
            seg: mean_seg_metrics(&masks)?,
            last_step: trace.last().copied(),
        })
    }

    /// Full run for one seed and 3D loss weight.
    pub fn run<T: Scalar>(&self, seed: u64, lambda: f64) -> Result<ToyReport> {
        let prep = self.prepare::<T>(seed)?;
        let (model, trace) = self.train_model(&prep, seed, lambda)?;
        self.evaluate(&prep, &model, seed, lambda, &trace)
    }
}

/// Median of a non-empty sample (mean of the middle two for even sizes).
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() || xs.iter().any(|x| x.is_nan()) {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn rejects_bad_split() {
        let e = ToyExperiment {
            train_landmarks: 16,
            ..ToyExperiment::default()
        };
        assert!(e.validate().is_err());
    }
}
