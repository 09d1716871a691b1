//! 3D label fusion: per-point descriptor averaging, ambiguity statistics,
//! interior/exterior mixing, and point-cloud export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::write_bytes;
use crate::error::{Error, Result};
use crate::ids::{ImageId, LandmarkId, ReconstructionId};
use crate::numerics::FeatureMap;
use crate::pairs::to_grid;
use crate::raster::Raster;
use crate::scalar::{argmax, softmax, Scalar};
use crate::sfm::{Point3D, Reconstruction};
use crate::trainer::ToyModel;

pub const DEFAULT_PHI: f64 = 0.5;
pub const STRICT_PHI: f64 = 0.75;
pub const AMBIGUOUS_RGB: [u8; 3] = [128, 128, 128];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptPolarity {
    interior: BTreeSet<String>,
    exterior: BTreeSet<String>,
}

impl ConceptPolarity {
    pub fn new<S: Into<String>>(
        interior: impl IntoIterator<Item = S>,
        exterior: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let interior: BTreeSet<String> = interior.into_iter().map(Into::into).collect();
        let exterior: BTreeSet<String> = exterior.into_iter().map(Into::into).collect();
        if let Some(c) = interior.intersection(&exterior).next() {
            return Err(Error::invalid(format!("{c:?} is both interior and exterior")));
        }
        Ok(Self { interior, exterior })
    }

    pub fn reference() -> Self {
        Self {
            interior: ["organ", "nave", "altar", "choir"].map(String::from).into(),
            exterior: ["portal", "facade", "tower"].map(String::from).into(),
        }
    }

    pub fn interior(&self) -> &BTreeSet<String> {
        &self.interior
    }

    pub fn exterior(&self) -> &BTreeSet<String> {
        &self.exterior
    }

    pub fn is_interior(&self, c: &str) -> bool {
        self.interior.contains(c)
    }

    pub fn is_exterior(&self, c: &str) -> bool {
        self.exterior.contains(c)
    }

    pub fn swapped(&self) -> Self {
        Self {
            interior: self.exterior.clone(),
            exterior: self.interior.clone(),
        }
    }
}

/// A feature map together with the resolution its keypoints refer to.
#[derive(Clone, Copy, Debug)]
pub struct Projection<'a, T> {
    pub features: &'a FeatureMap<T>,
    pub image_size: (u32, u32),
    pub xy: [f64; 2],
}

/// Average the descriptors at every projection (nearest feature cell), apply
/// the linear head and softmax. Returns (mean descriptor, probabilities).
pub fn fuse_point<T: Scalar>(
    model: &ToyModel<T>,
    projections: &[Projection<'_, T>],
) -> Result<(Vec<T>, Vec<T>)> {
    if projections.is_empty() {
        return Err(Error::Insufficient("point has no processable projection".into()));
    }
    let k = model.config.feature_dim;
    let mut mean = vec![T::zero(); k];
    for p in projections {
        if p.features.channels != k {
            return Err(Error::Dimension(format!(
                "feature map has {} channels, model expects {k}",
                p.features.channels
            )));
        }
        let g = to_grid(
            p.xy,
            p.image_size,
            (p.features.width as u32, p.features.height as u32),
        );
        for (m, &v) in mean.iter_mut().zip(p.features.pixel(g.x as usize, g.y as usize)) {
            *m += v;
        }
    }
    let n = T::from_usize_lossy(projections.len());
    for m in &mut mean {
        *m /= n;
    }
    let probs = softmax(&model.head_scores(&mean));
    Ok((mean, probs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPoint<T> {
    pub point_id: u64,
    pub xyz: [f64; 3],
    pub descriptor: Vec<T>,
    /// Concepts first, background last.
    pub probs: Vec<T>,
}

impl<T: Scalar> ScoredPoint<T> {
    pub fn confidence(&self) -> f64 {
        self.probs[argmax(&self.probs)].to_f64_lossy()
    }

    /// Concept index, unless the point is ambiguous at `phi`: confidence not
    /// above `phi`, or background winning.
    pub fn assigned(&self, phi: f64) -> Option<usize> {
        let best = argmax(&self.probs);
        let background = self.probs.len() - 1;
        (best != background && self.probs[best].to_f64_lossy() > phi).then_some(best)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCloud<T> {
    pub reconstruction_id: ReconstructionId,
    pub landmark_id: LandmarkId,
    pub concepts: Vec<String>,
    pub phi: f64,
    pub points: Vec<ScoredPoint<T>>,
}

/// One line of the JSONL export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub point_id: u64,
    pub xyz: [f64; 3],
    pub concept: Option<String>,
    pub confidence: f64,
}

impl<T: Scalar> ScoredCloud<T> {
    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn assigned_concept(&self, point: &ScoredPoint<T>) -> Option<&str> {
        point.assigned(self.phi).map(|c| self.concepts[c].as_str())
    }

    pub fn records(&self) -> Vec<PointRecord> {
        self.points
            .iter()
            .map(|p| PointRecord {
                point_id: p.point_id,
                xyz: p.xyz,
                concept: self.assigned_concept(p).map(str::to_owned),
                confidence: p.confidence(),
            })
            .collect()
    }

    /// Check the probability and assignment invariants.
    pub fn validate(&self) -> Result<()> {
        for p in &self.points {
            if p.probs.len() != self.concepts.len() + 1 {
                return Err(Error::Dimension(format!(
                    "point {} has {} probabilities for {} concepts",
                    p.point_id,
                    p.probs.len(),
                    self.concepts.len()
                )));
            }
            let s: f64 = p.probs.iter().map(|v| v.to_f64_lossy()).sum();
            let tol = 1e-6f64.max(T::epsilon().to_f64_lossy() * 100.0);
            if (s - 1.0).abs() > tol {
                return Err(Error::Consistency(format!(
                    "point {} probabilities sum to {s}",
                    p.point_id
                )));
            }
        }
        Ok(())
    }
}

/// Features of every image of `rec` that has a raster.
pub fn reconstruction_features<T: Scalar>(
    model: &ToyModel<T>,
    rec: &Reconstruction,
    images: &BTreeMap<ImageId, Raster<T>>,
) -> Result<BTreeMap<u32, (FeatureMap<T>, (u32, u32))>> {
    let todo: Vec<(u32, &Raster<T>)> = rec
        .images
        .values()
        .filter_map(|img| images.get(&ImageId::new(&img.name)).map(|r| (img.id, r)))
        .collect();
    todo.par_iter()
        .map(|&(id, r)| Ok((id, (model.features(r)?, (r.width as u32, r.height as u32)))))
        .collect()
}

/// Score every 3D point of `rec`. Every point needs at least one projection
/// into an image present in `images`.
pub fn fuse_reconstruction<T: Scalar>(
    model: &ToyModel<T>,
    rec: &Reconstruction,
    images: &BTreeMap<ImageId, Raster<T>>,
    concepts: &[String],
    phi: f64,
) -> Result<ScoredCloud<T>> {
    if concepts.len() != model.config.classes {
        return Err(Error::Dimension(format!(
            "{} concept names for a {}-class model",
            concepts.len(),
            model.config.classes
        )));
    }
    if !(0.0..1.0).contains(&phi) {
        return Err(Error::invalid(format!("phi must lie in [0, 1), got {phi}")));
    }
    let feats = reconstruction_features(model, rec, images)?;
    let pts: Vec<&Point3D> = rec.points.values().collect();
    let points = pts
        .par_iter()
        .map(|p| {
            let projections: Vec<Projection<'_, T>> = p
                .track
                .iter()
                .filter_map(|t| {
                    feats.get(&t.image_id).map(|(f, size)| Projection {
                        features: f,
                        image_size: *size,
                        xy: t.xy,
                    })
                })
                .collect();
            let (descriptor, probs) = fuse_point(model, &projections).map_err(|e| match e {
                Error::Insufficient(_) => Error::Insufficient(format!(
                    "point {} of {} has no processable projection",
                    p.id, rec.reconstruction_id
                )),
                e => e,
            })?;
            Ok(ScoredPoint {
                point_id: p.id,
                xyz: p.xyz,
                descriptor,
                probs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoredCloud {
        reconstruction_id: rec.reconstruction_id.clone(),
        landmark_id: rec.landmark_id.clone(),
        concepts: concepts.to_vec(),
        phi,
        points,
    })
}

/// Fraction of ambiguous points per landmark, averaged over landmarks.
pub fn theta<T: Scalar>(clouds: &[ScoredCloud<T>], phi: f64) -> Result<f64> {
    let mut per_lm: BTreeMap<&LandmarkId, (usize, usize)> = BTreeMap::new();
    for c in clouds {
        let e = per_lm.entry(&c.landmark_id).or_default();
        e.0 += c.points.iter().filter(|p| p.assigned(phi).is_none()).count();
        e.1 += c.points.len();
    }
    let fractions: Vec<f64> = per_lm
        .values()
        .filter(|(_, n)| *n > 0)
        .map(|&(a, n)| a as f64 / n as f64)
        .collect();
    if fractions.is_empty() {
        return Err(Error::Insufficient("theta of an empty cloud".into()));
    }
    Ok(fractions.iter().sum::<f64>() / fractions.len() as f64)
}

/// min(p_ext, 1 - p_ext) of one reconstruction, or `None` when no assigned
/// point is polarized.
pub fn reconstruction_delta<T: Scalar>(
    cloud: &ScoredCloud<T>,
    polarity: &ConceptPolarity,
    phi: f64,
) -> Option<f64> {
    let (mut ext, mut int) = (0usize, 0usize);
    for p in &cloud.points {
        if let Some(c) = p.assigned(phi) {
            let name = &cloud.concepts[c];
            if polarity.is_exterior(name) {
                ext += 1;
            } else if polarity.is_interior(name) {
                int += 1;
            }
        }
    }
    (ext + int > 0).then(|| {
        let p = ext as f64 / (ext + int) as f64;
        p.min(1.0 - p)
    })
}

/// Point-count-weighted mean of the per-reconstruction mixing error.
pub fn delta<T: Scalar>(
    clouds: &[ScoredCloud<T>],
    polarity: &ConceptPolarity,
    phi: f64,
) -> Result<f64> {
    let (mut num, mut den) = (0.0f64, 0usize);
    for c in clouds {
        if let Some(d) = reconstruction_delta(c, polarity, phi) {
            num += d * c.points.len() as f64;
            den += c.points.len();
        }
    }
    if den == 0 {
        return Err(Error::Insufficient(
            "no reconstruction has a polarized assigned point".into(),
        ));
    }
    Ok(num / den as f64)
}

/// Evenly spaced hues, one per concept.
pub fn default_palette(concepts: &[String]) -> BTreeMap<String, [u8; 3]> {
    let n = concepts.len().max(1) as f64;
    concepts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let h = i as f64 / n * 6.0;
            let x = 1.0 - (h % 2.0 - 1.0).abs();
            let (r, g, b) = match h as u32 {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            let q = |v: f64| (40.0 + 200.0 * v).round() as u8;
            (c.clone(), [q(r), q(g), q(b)])
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlyVertex {
    pub xyz: [f32; 3],
    pub rgb: [u8; 3],
}

pub fn ply_vertices<T: Scalar>(
    cloud: &ScoredCloud<T>,
    palette: &BTreeMap<String, [u8; 3]>,
    include_ambiguous: bool,
) -> Result<Vec<PlyVertex>> {
    if let Some(c) = cloud.concepts.iter().find(|c| !palette.contains_key(*c)) {
        return Err(Error::invalid(format!("palette has no colour for {c:?}")));
    }
    Ok(cloud
        .points
        .iter()
        .filter_map(|p| {
            let rgb = match cloud.assigned_concept(p) {
                Some(c) => palette[c],
                None if include_ambiguous => AMBIGUOUS_RGB,
                None => return None,
            };
            Some(PlyVertex {
                xyz: p.xyz.map(|v| v as f32),
                rgb,
            })
        })
        .collect())
}

pub fn ply_string(vertices: &[PlyVertex]) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", vertices.len());
    for p in ["x", "y", "z"] {
        let _ = writeln!(s, "property float {p}");
    }
    for p in ["red", "green", "blue"] {
        let _ = writeln!(s, "property uchar {p}");
    }
    s.push_str("end_header\n");
    for v in vertices {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            v.xyz[0], v.xyz[1], v.xyz[2], v.rgb[0], v.rgb[1], v.rgb[2]
        );
    }
    s
}

pub fn export_ply<T: Scalar>(
    path: &Path,
    cloud: &ScoredCloud<T>,
    palette: &BTreeMap<String, [u8; 3]>,
    include_ambiguous: bool,
) -> Result<usize> {
    let v = ply_vertices(cloud, palette, include_ambiguous)?;
    write_bytes(path, ply_string(&v).as_bytes())?;
    Ok(v.len())
}

/// Parse the ASCII layout written by [`ply_string`].
pub fn parse_ply(text: &str) -> Result<Vec<PlyVertex>> {
    let err = |line: usize, m: &str| Error::Parse {
        file: "ply".into(),
        line,
        message: m.to_owned(),
    };
    let mut lines = text.lines().enumerate();
    let mut count = None;
    let mut props = Vec::new();
    let mut header_done = false;
    for (i, l) in lines.by_ref() {
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["ply"] if i == 0 => {}
            _ if i == 0 => return Err(err(1, "missing ply magic")),
            ["format", "ascii", _] => {}
            ["format", ..] => return Err(err(i + 1, "only ascii ply is supported")),
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| err(i + 1, "bad vertex count"))?)
            }
            ["property", _, name] => props.push(name.to_string()),
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(err(i + 1, "unexpected header line")),
        }
    }
    let expected = ["x", "y", "z", "red", "green", "blue"];
    if !header_done || props != expected {
        return Err(err(0, "header must declare x y z red green blue and end_header"));
    }
    let n = count.ok_or_else(|| err(0, "missing element vertex"))?;
    let mut out = Vec::with_capacity(n);
    for (i, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let tok: Vec<&str> = l.split_whitespace().collect();
        if tok.len() != 6 {
            return Err(err(i + 1, "vertex line needs 6 fields"));
        }
        let f = |s: &str| s.parse::<f32>().map_err(|_| err(i + 1, "bad coordinate"));
        let u = |s: &str| s.parse::<u8>().map_err(|_| err(i + 1, "bad colour"));
        out.push(PlyVertex {
            xyz: [f(tok[0])?, f(tok[1])?, f(tok[2])?],
            rgb: [u(tok[3])?, u(tok[4])?, u(tok[5])?],
        });
    }
    if out.len() != n {
        return Err(err(0, &format!("header declares {n} vertices, found {}", out.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::trainer::{ModelConfig, Tensor};
    use rand::Rng;

    fn model(classes: usize, seed: u64) -> ToyModel<f64> {
        let mut rng = rng_from_seed(seed);
        let cfg = ModelConfig {
            classes,
            ..ModelConfig::default()
        };
        let mut m = ToyModel::init(cfg, &mut rng).unwrap();
        for w in m.tensor_mut(Tensor::HeadW) {
            *w = rng.gen_range(-3.0..3.0);
        }
        m
    }

    fn image(seed: u64) -> Raster<f64> {
        let mut rng = rng_from_seed(seed);
        Raster::new(16, 16, (0..3 * 256).map(|_| rng.gen()).collect()).unwrap()
    }

    fn cloud(lm: &str, probs: &[[f64; 3]]) -> ScoredCloud<f64> {
        ScoredCloud {
            reconstruction_id: ReconstructionId::new(format!("{lm}_r")),
            landmark_id: LandmarkId::new(lm),
            concepts: vec!["nave".into(), "portal".into()],
            phi: DEFAULT_PHI,
            points: probs
                .iter()
                .enumerate()
                .map(|(i, p)| ScoredPoint {
                    point_id: i as u64 + 1,
                    xyz: [i as f64, 0.5, -1.25],
                    descriptor: vec![],
                    probs: p.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn single_projection_matches_pixel_scores() {
        let m = model(4, 1);
        let img = image(2);
        let (f, maps) = m.forward(&img).unwrap();
        let proj = Projection {
            features: &f,
            image_size: (16, 16),
            xy: [9.7, 5.2],
        };
        let (_, probs) = fuse_point(&m, &[proj]).unwrap();
        let cell = 1 * f.width + 2;
        for (a, b) in probs.iter().zip(maps.pixel_probs(cell)) {
            assert!((a - b).abs() < 1e-12);
        }
        let (_, twice) = fuse_point(&m, &[proj, proj]).unwrap();
        for (a, b) in probs.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(fuse_point::<f64>(&m, &[]).is_err());
    }

    #[test]
    fn descriptor_mean_equals_score_mean() {
        for seed in 0..20 {
            let m = model(5, seed);
            let feats: Vec<_> = (0..3).map(|i| m.features(&image(100 + seed * 3 + i)).unwrap()).collect();
            let xy = [[1.0, 2.0], [7.5, 15.9], [12.0, 0.0]];
            let projs: Vec<_> = feats
                .iter()
                .zip(xy)
                .map(|(f, xy)| Projection {
                    features: f,
                    image_size: (16, 16),
                    xy,
                })
                .collect();
            let (_, fused) = fuse_point(&m, &projs).unwrap();
            let mut mean_scores = vec![0.0; 6];
            for p in &projs {
                let g = to_grid(p.xy, (16, 16), (4, 4));
                let s = m.head_scores(p.features.pixel(g.x as usize, g.y as usize));
                for (a, b) in mean_scores.iter_mut().zip(s) {
                    *a += b / 3.0;
                }
            }
            for (a, b) in fused.iter().zip(softmax(&mean_scores)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn theta_examples() {
        let all = cloud("a", &[[0.9, 0.05, 0.05], [0.1, 0.8, 0.1]]);
        assert_eq!(theta(&[all.clone()], 0.5).unwrap(), 0.0);
        let none = cloud("a", &[[0.4, 0.3, 0.3], [0.05, 0.05, 0.9]]);
        assert_eq!(theta(&[none], 0.5).unwrap(), 1.0);
        let half = cloud("b", &[[0.9, 0.05, 0.05], [0.3, 0.3, 0.4]]);
        assert_eq!(theta(&[half.clone()], 0.5).unwrap(), 0.5);
        // unweighted over landmarks
        assert_eq!(theta(&[all, half], 0.5).unwrap(), 0.25);
        assert!(theta::<f64>(&[cloud("c", &[])], 0.5).is_err());
    }

    #[test]
    fn background_argmax_is_ambiguous() {
        let c = cloud("a", &[[0.05, 0.05, 0.9]]);
        assert_eq!(c.points[0].assigned(0.5), None);
        assert_eq!(c.records()[0].concept, None);
    }

    #[test]
    fn delta_examples() {
        let pol = ConceptPolarity::reference();
        let ext = cloud("a", &[[0.1, 0.8, 0.1]; 100]);
        assert_eq!(delta(&[ext.clone()], &pol, 0.5).unwrap(), 0.0);
        let mixed = cloud("b", &[[0.8, 0.1, 0.1], [0.1, 0.8, 0.1]]);
        assert_eq!(delta(&[mixed], &pol, 0.5).unwrap(), 0.5);
        let mut big = cloud("c", &[[0.1, 0.8, 0.1]; 300]);
        for p in big.points.iter_mut().take(150) {
            p.probs = vec![0.8, 0.1, 0.1];
        }
        assert_eq!(delta(&[ext, big.clone()], &pol, 0.5).unwrap(), 0.375);
        assert_eq!(
            delta(&[big.clone()], &pol.swapped(), 0.5).unwrap(),
            delta(&[big], &pol, 0.5).unwrap()
        );
        let amb = cloud("d", &[[0.4, 0.3, 0.3]]);
        assert!(delta(&[amb], &pol, 0.5).is_err());
    }

    #[test]
    fn polarity_sets_are_disjoint() {
        assert!(ConceptPolarity::new(["nave"], ["nave"]).is_err());
        let r = ConceptPolarity::reference();
        assert!(r.is_interior("choir") && r.is_exterior("tower"));
        assert!(!r.is_interior("statue") && !r.is_exterior("statue"));
    }

    #[test]
    fn ply_export_and_reparse() {
        let c = cloud("a", &[[0.9, 0.05, 0.05], [0.3, 0.3, 0.4]]);
        let pal = default_palette(&c.concepts);
        let v = ply_vertices(&c, &pal, false).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rgb, pal["nave"]);
        let with = ply_vertices(&c, &pal, true).unwrap();
        assert_eq!(with[1].rgb, AMBIGUOUS_RGB);
        assert_eq!(parse_ply(&ply_string(&with)).unwrap(), with);
        let empty = ply_vertices(&cloud("a", &[[0.3, 0.3, 0.4]]), &pal, false).unwrap();
        let text = ply_string(&empty);
        assert!(text.contains("element vertex 0\n"));
        assert!(parse_ply(&text).unwrap().is_empty());
        let mut short = pal.clone();
        short.remove("portal");
        assert!(ply_vertices(&c, &short, false).is_err());
    }
}
