//! Deterministic synthetic landmarks: region geometry, captions, category
//! paths, rendered views and ground truth.
//!
//! Each landmark is a row of unit square faces ("regions") in the z = 0 plane.
//! Every region is photographed by a few cameras whose windows jitter around
//! the face, so same-region views share many 3D points and views of different
//! regions share none. Concept regions carry a planted noun in their leaf
//! category; filler regions carry none, except for single scattered images
//! tagged with an outlier noun.

pub mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, write_bytes, write_jsonl_string, Corpus, ImageDoc, NounLexicon};
use crate::error::{Error, Result};
use crate::fusion::ConceptPolarity;
use crate::ids::{ImageId, LandmarkId, ReconstructionId};
use crate::labeling::REFERENCE_CONCEPTS;
use crate::mining::DistillThresholds;
use crate::raster::{Mask, Raster};
use crate::rng::stage_rng;
use crate::scalar::Scalar;
use crate::sfm::{Camera, Keypoint, Point3D, Reconstruction, RegisteredImage, TrackElement};

pub use render::{Nuisance, Signature, Window};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub landmarks: usize,
    /// Planted concepts, each one region per hosting landmark.
    pub concepts: Vec<String>,
    /// Landmarks hosting each planted concept (random subset per concept).
    pub concept_landmarks: Option<usize>,
    pub cameras_per_region: usize,
    /// Noun-free regions per landmark; outlier images are scattered over them.
    pub filler_regions: usize,
    /// Face points per side; each face has `points_per_side^2` candidates.
    pub points_per_side: usize,
    /// Window offset range, in face widths, around the face.
    pub view_jitter: f64,
    pub outlier_nouns: Vec<String>,
    pub outlier_landmarks: Option<usize>,
    /// Probability that a caption also names a wrong vocabulary concept.
    pub outlier_caption_rate: f64,
    /// Probability of an extra unregistered view per region camera.
    pub unregistered_rate: f64,
    /// Probability that a concept caption uses a connector template.
    pub connector_rate: f64,
    pub image_size: usize,
    /// Per-image gain/colour-cast amplitude.
    pub nuisance: f64,
    pub pixel_noise: f64,
    /// Per-landmark colour drift of concept textures.
    pub signature_drift: f64,
    /// Exterior and interior regions go to separate reconstructions.
    pub split_by_polarity: bool,
    pub thresholds: DistillThresholds,
    /// Enforce planted >= 2x and outliers <= 0.5x the density threshold.
    pub check_separation: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            landmarks: 30,
            concepts: vec!["facade".into(), "nave".into(), "portal".into()],
            concept_landmarks: None,
            cameras_per_region: 10,
            filler_regions: 10,
            points_per_side: 10,
            view_jitter: 0.25,
            outlier_nouns: vec!["statue".into(), "window".into()],
            outlier_landmarks: None,
            outlier_caption_rate: 0.0,
            unregistered_rate: 0.0,
            connector_rate: 0.25,
            image_size: 32,
            nuisance: 0.25,
            pixel_noise: 0.02,
            signature_drift: 0.08,
            split_by_polarity: true,
            thresholds: DistillThresholds::default(),
            check_separation: true,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("infeasible scene spec: {m}")));
        if self.landmarks == 0 {
            return bad("landmarks must be at least 1".into());
        }
        if self.cameras_per_region < 2 {
            return bad(format!(
                "cameras_per_region must be at least 2, got {}",
                self.cameras_per_region
            ));
        }
        if self.points_per_side < 2 {
            return bad("points_per_side must be at least 2".into());
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return bad(format!(
                "image_size must be a multiple of 4 and at least 8, got {}",
                self.image_size
            ));
        }
        if !(0.0..0.5).contains(&self.view_jitter) {
            return bad("view_jitter must lie in [0, 0.5)".into());
        }
        for (name, p) in [
            ("outlier_caption_rate", self.outlier_caption_rate),
            ("unregistered_rate", self.unregistered_rate),
            ("connector_rate", self.connector_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.nuisance) || self.pixel_noise < 0.0 || self.signature_drift < 0.0
        {
            return bad("noise amplitudes must be non-negative (nuisance < 1)".into());
        }
        let mut seen = BTreeSet::new();
        for c in &self.concepts {
            if !REFERENCE_CONCEPTS.contains(&c.as_str()) {
                return bad(format!("planted concept {c:?} is not in the vocabulary"));
            }
            if !seen.insert(c) {
                return bad(format!("planted concept {c:?} listed twice"));
            }
        }
        for n in &self.outlier_nouns {
            if tokenize(n) != [n.clone()] {
                return bad(format!("outlier noun {n:?} must be one lowercase word"));
            }
            if !seen.insert(n) {
                return bad(format!("outlier noun {n:?} collides with another noun"));
            }
        }
        if self.concept_landmarks.unwrap_or(0) > self.landmarks
            || self.outlier_landmarks.unwrap_or(0) > self.landmarks
        {
            return bad("concept/outlier landmark count exceeds landmarks".into());
        }
        if !self.outlier_nouns.is_empty() && self.filler_regions == 0 {
            return bad("outlier nouns need at least one filler region".into());
        }
        if self.outlier_nouns.len() > self.cameras_per_region {
            return bad("more outlier nouns than cameras per filler region".into());
        }
        self.thresholds.validate()
    }

    fn landmark_name(&self, i: usize) -> String {
        let width = (self.landmarks.max(1) - 1).to_string().len().max(2);
        format!("lm{i:0width$}")
    }
}

/// One textured face.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub landmark_id: LandmarkId,
    pub index: usize,
    pub concept: Option<String>,
    pub signature: Signature,
    pub reconstruction_id: ReconstructionId,
}

/// How an image was taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub landmark_id: LandmarkId,
    pub region: usize,
    pub window: Window,
    pub nuisance: Nuisance,
    pub registered: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointTruth {
    pub reconstruction_id: ReconstructionId,
    pub point_id: u64,
    pub concept: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub image_id: ImageId,
    pub landmark_id: LandmarkId,
    pub concept: Option<String>,
    /// Rows of `0`/`1`; empty when the image shows no planted concept.
    pub mask: Vec<String>,
}

impl ImageTruth {
    /// The stored mask, or an all-false `size`×`size` mask when empty.
    pub fn to_mask(&self, size: usize) -> Result<Mask> {
        if self.mask.is_empty() {
            return Ok(Mask::empty(size, size));
        }
        let h = self.mask.len();
        let w = self.mask[0].len();
        let mut data = Vec::with_capacity(w * h);
        for row in &self.mask {
            if row.len() != w {
                return Err(Error::Dimension(format!("ragged mask for {}", self.image_id)));
            }
            for ch in row.chars() {
                data.push(match ch {
                    '1' => true,
                    '0' => false,
                    _ => return Err(Error::invalid(format!("mask character {ch:?}"))),
                });
            }
        }
        Mask::new(w, h, data)
    }
}

/// Brute-force density of one noun, as checked at generation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityCheck {
    pub noun: String,
    pub planted: bool,
    pub support: usize,
    pub mean_density: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub spec: SceneSpec,
    pub reconstructions: Vec<Reconstruction>,
    pub corpus: Corpus,
    pub lexicon: NounLexicon,
    pub regions: Vec<Region>,
    pub views: BTreeMap<ImageId, View>,
    pub point_truth: Vec<PointTruth>,
    pub checks: Vec<DensityCheck>,
    tints: BTreeMap<LandmarkId, [f64; 3]>,
    region_lookup: BTreeMap<(LandmarkId, usize), usize>,
}

pub const RECONSTRUCTIONS_DIR: &str = "reconstructions";
pub const IMAGES_DIR: &str = "images";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const NOUNS_FILE: &str = "lexicon/nouns.txt";
pub const BLOCKLIST_FILE: &str = "lexicon/blocklist.txt";
pub const IMAGE_TRUTH_FILE: &str = "truth/images.jsonl";
pub const POINT_TRUTH_FILE: &str = "truth/points.jsonl";
pub const SPEC_FILE: &str = "scene.json";

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn choose_subset(n: usize, k: usize, rng: &mut impl Rng) -> BTreeSet<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    all.into_iter().take(k).collect()
}

pub fn generate(spec: &SceneSpec) -> Result<Fixture> {
    spec.validate()?;
    let polarity = ConceptPolarity::reference();
    let mut layout_rng = stage_rng(spec.seed, "synth/layout");
    let mut look_rng = stage_rng(spec.seed, "synth/appearance");
    let mut text_rng = stage_rng(spec.seed, "synth/captions");
    let mut view_rng = stage_rng(spec.seed, "synth/views");

    let hosts: Vec<BTreeSet<usize>> = spec
        .concepts
        .iter()
        .map(|_| {
            choose_subset(
                spec.landmarks,
                spec.concept_landmarks.unwrap_or(spec.landmarks),
                &mut layout_rng,
            )
        })
        .collect();
    let outlier_hosts = choose_subset(
        spec.landmarks,
        spec.outlier_landmarks.unwrap_or(spec.landmarks),
        &mut layout_rng,
    );

    let mut regions = Vec::new();
    let mut views = BTreeMap::new();
    let mut docs = Vec::new();
    let mut reconstructions = Vec::new();
    let mut point_truth = Vec::new();
    let mut tints = BTreeMap::new();

    for lm in 0..spec.landmarks {
        let lm_name = spec.landmark_name(lm);
        let lm_id = LandmarkId::new(&lm_name);
        let display = capitalize(&lm_name);
        let gray = look_rng.gen_range(0.35..0.65);
        let tint = [0; 3].map(|_| gray + look_rng.gen_range(-0.05..0.05));
        tints.insert(lm_id.clone(), tint);

        // regions: planted concepts hosted here, then fillers
        let mut lm_regions: Vec<Option<String>> = spec
            .concepts
            .iter()
            .zip(&hosts)
            .filter(|(_, h)| h.contains(&lm))
            .map(|(c, _)| Some(c.clone()))
            .collect();
        let planted_here: Vec<String> = lm_regions.iter().flatten().cloned().collect();
        lm_regions.extend((0..spec.filler_regions).map(|_| None));

        let recon_of = |concept: &Option<String>| -> ReconstructionId {
            if !spec.split_by_polarity {
                return ReconstructionId::new(format!("{lm_name}_r0"));
            }
            match concept {
                Some(c) if polarity.is_interior(c) => ReconstructionId::new(format!("{lm_name}_int")),
                _ => ReconstructionId::new(format!("{lm_name}_ext")),
            }
        };

        let mut per_recon: BTreeMap<ReconstructionId, Vec<usize>> = BTreeMap::new();
        let base = regions.len();
        for (ri, concept) in lm_regions.iter().enumerate() {
            let signature = match concept {
                Some(c) => {
                    let k = REFERENCE_CONCEPTS.iter().position(|r| r == c).unwrap_or(0);
                    Signature::for_concept(k, REFERENCE_CONCEPTS.len())
                        .perturbed(spec.signature_drift, &mut look_rng)
                }
                None => Signature::random(&mut look_rng),
            };
            let rid = recon_of(concept);
            per_recon.entry(rid.clone()).or_default().push(ri);
            regions.push(Region {
                landmark_id: lm_id.clone(),
                index: ri,
                concept: concept.clone(),
                signature,
                reconstruction_id: rid,
            });
        }

        // cameras and captions
        let mut region_images: Vec<Vec<ImageId>> = vec![Vec::new(); lm_regions.len()];
        for (ri, concept) in lm_regions.iter().enumerate() {
            let rid = &regions[base + ri].reconstruction_id;
            let filler_index = ri.checked_sub(planted_here.len());
            for cam in 0..spec.cameras_per_region {
                let extra = view_rng.gen_bool(spec.unregistered_rate);
                let shots: &[bool] = if extra { &[true, false] } else { &[true] };
                for &registered in shots {
                    let id = if registered {
                        ImageId::new(format!("{lm_name}_r{ri:02}_c{cam:02}"))
                    } else {
                        ImageId::new(format!("{lm_name}_r{ri:02}_u{cam:02}"))
                    };
                    let window = Window {
                        u0: view_rng.gen_range(-spec.view_jitter..=spec.view_jitter),
                        v0: view_rng.gen_range(-spec.view_jitter..=spec.view_jitter),
                        size: 1.0,
                    };
                    let nuisance = Nuisance::sample(spec.nuisance, spec.pixel_noise, &mut view_rng);
                    let outlier = match filler_index {
                        Some(_) if outlier_hosts.contains(&lm) && registered => {
                            spec.outlier_nouns.get(cam).cloned()
                        }
                        _ => None,
                    };
                    let leaf = match (concept, &outlier) {
                        (Some(c), _) => format!("{} of {display}", capitalize(c)),
                        (None, Some(n)) => format!("{} in {display}", capitalize(n)),
                        (None, None) => format!("Views of {display}"),
                    };
                    let side = match concept {
                        Some(c) if polarity.is_interior(c) => "Interior",
                        _ => "Exterior",
                    };
                    let caption =
                        caption_for(spec, concept.as_deref(), outlier.as_deref(), &display, &planted_here, &mut text_rng);
                    docs.push(ImageDoc {
                        image_id: id.clone(),
                        landmark_id: lm_id.clone(),
                        caption,
                        category_path: vec![lm_name.clone(), format!("{side} of {display}"), leaf],
                        registered,
                        reconstruction_id: registered.then(|| rid.clone()),
                    });
                    views.insert(
                        id.clone(),
                        View {
                            landmark_id: lm_id.clone(),
                            region: ri,
                            window,
                            nuisance,
                            registered,
                        },
                    );
                    if registered {
                        region_images[ri].push(id);
                    }
                }
            }
        }

        for (rid, members) in per_recon {
            let (rec, truth) = build_reconstruction(
                spec,
                &lm_id,
                &rid,
                &members,
                &regions[base..],
                &region_images,
                &views,
            );
            reconstructions.push(rec);
            point_truth.extend(truth);
        }
    }

    let nouns: Vec<String> = REFERENCE_CONCEPTS
        .iter()
        .map(|s| s.to_string())
        .chain(spec.outlier_nouns.iter().cloned())
        .collect();
    let blocklist: Vec<String> = (0..spec.landmarks).map(|i| spec.landmark_name(i)).collect();
    let lexicon = NounLexicon::new(nouns, blocklist);
    let corpus = Corpus::new(docs)?;
    let region_lookup = regions
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.landmark_id.clone(), r.index), i))
        .collect();
    let mut fixture = Fixture {
        spec: spec.clone(),
        reconstructions,
        corpus,
        lexicon,
        regions,
        views,
        point_truth,
        checks: Vec::new(),
        tints,
        region_lookup,
    };
    fixture.checks = fixture.density_checks();
    if spec.check_separation {
        fixture.enforce_separation()?;
    }
    Ok(fixture)
}

fn caption_for(
    spec: &SceneSpec,
    concept: Option<&str>,
    outlier: Option<&str>,
    display: &str,
    planted_here: &[String],
    rng: &mut impl Rng,
) -> String {
    let mut caption = match (concept, outlier) {
        (Some(c), _) => {
            let others: Vec<&String> = planted_here.iter().filter(|o| o.as_str() != c).collect();
            if !others.is_empty() && rng.gen_bool(spec.connector_rate) {
                let other = others[rng.gen_range(0..others.len())];
                match rng.gen_range(0..3) {
                    0 => format!("{c} looking towards {other}"),
                    1 => format!("the {c} seen from the {other}"),
                    _ => format!("{c} with the {other} behind"),
                }
            } else {
                match rng.gen_range(0..4) {
                    0 => format!("{c} of {display}"),
                    1 => format!("view of the {c}"),
                    2 => format!("the {c} in {display}"),
                    _ => format!("{display} {c} in winter"),
                }
            }
        }
        (None, Some(n)) => format!("{n} of a saint"),
        (None, None) => match rng.gen_range(0..3) {
            0 => format!("view of {display}"),
            1 => format!("{display} in summer"),
            _ => "street scene".to_string(),
        },
    };
    if rng.gen_bool(spec.outlier_caption_rate) {
        let wrong = REFERENCE_CONCEPTS[rng.gen_range(0..REFERENCE_CONCEPTS.len())];
        caption.push_str(&format!(" and {wrong}"));
    }
    caption
}

fn face_point(spec: &SceneSpec, i: usize, j: usize) -> (f64, f64) {
    let n = spec.points_per_side as f64;
    ((i as f64 + 0.5) / n, (j as f64 + 0.5) / n)
}

fn build_reconstruction(
    spec: &SceneSpec,
    lm_id: &LandmarkId,
    rid: &ReconstructionId,
    members: &[usize],
    lm_regions: &[Region],
    region_images: &[Vec<ImageId>],
    views: &BTreeMap<ImageId, View>,
) -> (Reconstruction, Vec<PointTruth>) {
    let size = spec.image_size;
    let camera = Camera {
        id: 1,
        model: "PINHOLE".into(),
        width: size as u32,
        height: size as u32,
        params: vec![size as f64, size as f64, size as f64 / 2.0, size as f64 / 2.0],
    };
    let mut images: BTreeMap<u32, RegisteredImage> = BTreeMap::new();
    let mut points = BTreeMap::new();
    let mut truth = Vec::new();
    let mut next_image = 1u32;
    let mut next_point = 1u64;
    for &ri in members {
        let region = &lm_regions[ri];
        let ids: Vec<u32> = region_images[ri]
            .iter()
            .map(|name| {
                let view = &views[name];
                let id = next_image;
                next_image += 1;
                images.insert(
                    id,
                    RegisteredImage {
                        id,
                        qvec: [1.0, 0.0, 0.0, 0.0],
                        tvec: [-(3.0 * ri as f64 + view.window.u0), -view.window.v0, 4.0],
                        camera_id: 1,
                        name: name.to_string(),
                        keypoints: Vec::new(),
                    },
                );
                id
            })
            .collect();
        for j in 0..spec.points_per_side {
            for i in 0..spec.points_per_side {
                let (u, v) = face_point(spec, i, j);
                let seen: Vec<(u32, [f64; 2])> = region_images[ri]
                    .iter()
                    .zip(&ids)
                    .filter_map(|(name, &iid)| {
                        let xy = views[name].window.to_pixel(u, v, size, size);
                        let inside = (0.0..size as f64).contains(&xy[0])
                            && (0.0..size as f64).contains(&xy[1]);
                        inside.then_some((iid, xy))
                    })
                    .collect();
                if seen.len() < 2 {
                    continue;
                }
                let pid = next_point;
                next_point += 1;
                let mut track = Vec::with_capacity(seen.len());
                for (iid, xy) in seen {
                    let img = images.get_mut(&iid).expect("image inserted above");
                    track.push(TrackElement {
                        image_id: iid,
                        keypoint_index: img.keypoints.len(),
                        xy,
                    });
                    img.keypoints.push(Keypoint {
                        xy,
                        point3d_id: Some(pid),
                    });
                }
                let rgb = region.signature.sample(u, v).map(|c| (c * 255.0).round() as u8);
                points.insert(
                    pid,
                    Point3D {
                        id: pid,
                        xyz: [3.0 * ri as f64 + u, v, 0.0],
                        rgb,
                        error: 0.5,
                        track,
                    },
                );
                truth.push(PointTruth {
                    reconstruction_id: rid.clone(),
                    point_id: pid,
                    concept: region.concept.clone(),
                });
            }
        }
    }
    // a couple of untriangulated keypoints per image, as real files have
    for img in images.values_mut() {
        let c = size as f64 / 2.0;
        img.keypoints.push(Keypoint {
            xy: [c - 0.25, c + 0.75],
            point3d_id: None,
        });
        img.keypoints.push(Keypoint {
            xy: [0.5, size as f64 - 1.5],
            point3d_id: None,
        });
    }
    let rec = Reconstruction {
        reconstruction_id: rid.clone(),
        landmark_id: lm_id.clone(),
        cameras: BTreeMap::from([(1, camera)]),
        images,
        points,
    };
    (rec, truth)
}

impl Fixture {
    fn region_of(&self, view: &View) -> &Region {
        &self.regions[self.region_lookup[&(view.landmark_id.clone(), view.region)]]
    }

    fn view(&self, id: &ImageId) -> Result<&View> {
        self.views
            .get(id)
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    pub fn render<T: Scalar>(&self, id: &ImageId) -> Result<Raster<T>> {
        let view = self.view(id)?;
        let region = self.region_of(view);
        Ok(render::render_view(
            &region.signature,
            self.tints[&view.landmark_id],
            &view.window,
            &view.nuisance,
            self.spec.image_size,
            self.spec.image_size,
        ))
    }

    /// Planted concept visible in the image, if any.
    pub fn image_concept(&self, id: &ImageId) -> Result<Option<&str>> {
        Ok(self.region_of(self.view(id)?).concept.as_deref())
    }

    /// Pixels of the planted concept; empty for filler views.
    pub fn mask(&self, id: &ImageId) -> Result<Mask> {
        let view = self.view(id)?;
        let n = self.spec.image_size;
        Ok(if self.region_of(view).concept.is_some() {
            render::face_mask(&view.window, n, n)
        } else {
            Mask::empty(n, n)
        })
    }

    pub fn image_truth(&self) -> Result<Vec<ImageTruth>> {
        self.views
            .keys()
            .map(|id| {
                let concept = self.image_concept(id)?.map(str::to_owned);
                let mask = if concept.is_some() {
                    let m = self.mask(id)?;
                    m.data
                        .chunks(m.width)
                        .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect())
                        .collect()
                } else {
                    Vec::new()
                };
                Ok(ImageTruth {
                    image_id: id.clone(),
                    landmark_id: self.views[id].landmark_id.clone(),
                    concept,
                    mask,
                })
            })
            .collect()
    }

    pub fn planted(&self) -> &[String] {
        &self.spec.concepts
    }

    /// Image-level concepts of registered images, as generated.
    pub fn image_concepts(&self) -> BTreeMap<ImageId, Option<String>> {
        self.views
            .iter()
            .map(|(id, v)| (id.clone(), self.region_of(v).concept.clone()))
            .collect()
    }

    /// Mean density of every planted and outlier noun, computed directly from
    /// the generated point ids rather than through the track index.
    fn density_checks(&self) -> Vec<DensityCheck> {
        let mut sees: BTreeMap<&str, BTreeSet<(&ReconstructionId, u64)>> = BTreeMap::new();
        for rec in &self.reconstructions {
            for img in rec.images.values() {
                let set = sees.entry(img.name.as_str()).or_default();
                for kp in &img.keypoints {
                    if let Some(p) = kp.point3d_id {
                        set.insert((&rec.reconstruction_id, p));
                    }
                }
            }
        }
        let th = &self.spec.thresholds;
        let planted: BTreeSet<&String> = self.spec.concepts.iter().collect();
        planted
            .iter()
            .copied()
            .chain(self.spec.outlier_nouns.iter())
            .map(|noun| {
                let mut per_lm: BTreeMap<&LandmarkId, Vec<&str>> = BTreeMap::new();
                for d in self.corpus.docs() {
                    if tokenize(d.leaf_category()).iter().any(|t| t == noun) {
                        let nodes = per_lm.entry(&d.landmark_id).or_default();
                        if d.registered && sees.contains_key(d.image_id.as_str()) {
                            nodes.push(d.image_id.as_str());
                        }
                    }
                }
                let mut densities = Vec::new();
                for nodes in per_lm.values() {
                    let v = nodes.len();
                    if v < 2 || v < th.min_nodes {
                        continue;
                    }
                    let mut e = 0usize;
                    for a in 0..v {
                        for b in a + 1..v {
                            if sees[nodes[a]].intersection(&sees[nodes[b]]).count() >= th.min_shared {
                                e += 1;
                            }
                        }
                    }
                    densities.push(2.0 * e as f64 / (v * (v - 1)) as f64);
                }
                DensityCheck {
                    noun: noun.clone(),
                    planted: planted.contains(noun),
                    support: per_lm.len(),
                    mean_density: (!densities.is_empty())
                        .then(|| densities.iter().sum::<f64>() / densities.len() as f64),
                }
            })
            .collect()
    }

    fn enforce_separation(&self) -> Result<()> {
        let rho = self.spec.thresholds.min_rho;
        for c in &self.checks {
            let ok = match (c.planted, c.mean_density) {
                (true, Some(d)) => d >= 2.0 * rho,
                (true, None) => false,
                (false, d) => d.map_or(true, |d| d <= 0.5 * rho),
            };
            if !ok {
                return Err(Error::Consistency(format!(
                    "fixture self-check failed for {:?} ({}): density {:?} vs threshold {rho}",
                    c.noun,
                    if c.planted { "planted" } else { "outlier" },
                    c.mean_density
                )));
            }
        }
        Ok(())
    }

    /// Write reconstructions, corpus, lexicon, truth and (optionally) PNG
    /// views under `dir`. Returns written paths relative to `dir`, sorted.
    pub fn write(&self, dir: &Path, with_images: bool) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for rec in &self.reconstructions {
            let rel = Path::new(RECONSTRUCTIONS_DIR)
                .join(rec.landmark_id.as_str())
                .join(rec.reconstruction_id.as_str());
            rec.write_dir(&dir.join(&rel))?;
            for f in [crate::sfm::CAMERAS_FILE, crate::sfm::IMAGES_FILE, crate::sfm::POINTS_FILE] {
                written.push(rel.join(f));
            }
        }
        self.corpus.save(&dir.join(CORPUS_FILE))?;
        self.lexicon
            .save(&dir.join(NOUNS_FILE), &dir.join(BLOCKLIST_FILE))?;
        write_bytes(
            &dir.join(IMAGE_TRUTH_FILE),
            write_jsonl_string(&self.image_truth()?).as_bytes(),
        )?;
        write_bytes(
            &dir.join(POINT_TRUTH_FILE),
            write_jsonl_string(&self.point_truth).as_bytes(),
        )?;
        let spec_json = serde_json::to_string_pretty(&self.spec)? + "\n";
        write_bytes(&dir.join(SPEC_FILE), spec_json.as_bytes())?;
        written.extend(
            [CORPUS_FILE, NOUNS_FILE, BLOCKLIST_FILE, IMAGE_TRUTH_FILE, POINT_TRUTH_FILE, SPEC_FILE]
                .map(PathBuf::from),
        );
        if with_images {
            for id in self.views.keys() {
                let rel = Path::new(IMAGES_DIR).join(format!("{id}.png"));
                self.render::<f32>(id)?.save_png(&dir.join(&rel))?;
                written.push(rel);
            }
        }
        written.sort();
        Ok(written)
    }
}

/// Load `<dir>/images/<id>.png` for every listed image.
pub fn load_images<T: Scalar>(
    dir: &Path,
    ids: impl IntoIterator<Item = ImageId>,
) -> Result<BTreeMap<ImageId, Raster<T>>> {
    ids.into_iter()
        .map(|id| {
            let p = dir.join(IMAGES_DIR).join(format!("{id}.png"));
            Raster::load_png(&p).map(|r| (id, r))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::NounTagger;

    fn small() -> SceneSpec {
        SceneSpec {
            landmarks: 4,
            cameras_per_region: 4,
            filler_regions: 3,
            check_separation: false,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn infeasible_specs_error() {
        for spec in [
            SceneSpec {
                cameras_per_region: 1,
                ..small()
            },
            SceneSpec {
                concepts: vec!["gargoyle".into()],
                ..small()
            },
            SceneSpec {
                outlier_nouns: vec!["nave".into()],
                ..small()
            },
            SceneSpec {
                image_size: 30,
                ..small()
            },
            SceneSpec {
                view_jitter: 0.5,
                ..small()
            },
        ] {
            assert!(matches!(generate(&spec), Err(Error::InvalidArgument(_))), "{spec:?}");
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.corpus.to_jsonl(), b.corpus.to_jsonl());
        assert_eq!(a.reconstructions, b.reconstructions);
        let id = a.views.keys().next().unwrap();
        assert_eq!(a.render::<f32>(id).unwrap(), b.render::<f32>(id).unwrap());
        let c = generate(&SceneSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.corpus.to_jsonl(), c.corpus.to_jsonl());
    }

    #[test]
    fn region_overlap_is_engineered() {
        let f = generate(&small()).unwrap();
        let index = crate::sfm::build_track_index(&f.reconstructions).unwrap();
        let ids = index.images().to_vec();
        for a in &ids {
            for b in &ids {
                if a >= b {
                    continue;
                }
                let (va, vb) = (&f.views[a], &f.views[b]);
                let shared = index.shared_keypoints(a, b).unwrap();
                if va.landmark_id == vb.landmark_id && va.region == vb.region {
                    assert!(shared >= 25, "{a} {b} {shared}");
                } else {
                    assert_eq!(shared, 0, "{a} {b}");
                }
            }
        }
    }

    #[test]
    fn point_truth_matches_masks() {
        let f = generate(&small()).unwrap();
        let by_key: BTreeMap<(&ReconstructionId, u64), &Option<String>> = f
            .point_truth
            .iter()
            .map(|p| ((&p.reconstruction_id, p.point_id), &p.concept))
            .collect();
        for rec in &f.reconstructions {
            for p in rec.points.values() {
                let concept = by_key[&(&rec.reconstruction_id, p.id)];
                for t in &p.track {
                    let name = ImageId::new(&rec.images[&t.image_id].name);
                    assert_eq!(f.image_concept(&name).unwrap(), concept.as_deref());
                    let m = f.mask(&name).unwrap();
                    let on = m.get(t.xy[0] as usize, t.xy[1] as usize);
                    assert_eq!(on, concept.is_some());
                }
            }
        }
    }

    #[test]
    fn polarity_split_and_leaf_nouns() {
        let f = generate(&small()).unwrap();
        for rec in &f.reconstructions {
            let interior = rec.reconstruction_id.as_str().ends_with("_int");
            for img in rec.images.values() {
                let c = f.image_concept(&ImageId::new(&img.name)).unwrap();
                assert_eq!(interior, c == Some("nave"));
            }
        }
        for d in f.corpus.docs() {
            let leaf_nouns: Vec<String> = f
                .lexicon
                .tag(&tokenize(d.leaf_category()))
                .into_iter()
                .map(|(n, _)| n)
                .collect();
            if let Some(c) = f.image_concept(&d.image_id).unwrap() {
                assert_eq!(leaf_nouns, [c.to_string()]);
            } else {
                assert!(leaf_nouns.iter().all(|n| f.spec.outlier_nouns.contains(n)));
            }
        }
    }

    #[test]
    fn self_check_rejects_broken_separation() {
        // four cameras per region cannot form a qualifying graph
        let spec = SceneSpec {
            check_separation: true,
            ..small()
        };
        assert!(matches!(generate(&spec), Err(Error::Consistency(_))));
    }

    #[test]
    fn write_round_trips_through_public_readers() {
        let spec = SceneSpec {
            landmarks: 2,
            ..small()
        };
        let f = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = f.write(dir.path(), true).unwrap();
        assert!(files.iter().any(|p| p.starts_with(IMAGES_DIR)));
        let recs = crate::sfm::read_reconstruction_tree(&dir.path().join(RECONSTRUCTIONS_DIR)).unwrap();
        assert_eq!(recs, f.reconstructions);
        let corpus = crate::corpus::load_corpus(&dir.path().join(CORPUS_FILE)).unwrap();
        assert_eq!(corpus, f.corpus);
        let id = f.views.keys().next().unwrap().clone();
        let imgs = load_images::<f32>(dir.path(), [id.clone()]).unwrap();
        assert_eq!(imgs[&id].to_rgb8(), f.render::<f32>(&id).unwrap().to_rgb8());
    }

    #[test]
    fn truth_masks_round_trip() {
        let f = generate(&small()).unwrap();
        for t in f.image_truth().unwrap() {
            assert_eq!(t.to_mask(f.spec.image_size).unwrap(), f.mask(&t.image_id).unwrap());
        }
    }
}
