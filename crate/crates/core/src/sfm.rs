//! Sparse reconstruction ingest and the point-track index.
//!
//! The reader accepts the three-file text export (`cameras.txt`,
//! `images.txt`, `points3D.txt`). Images are identified corpus-wide by their
//! NAME column; point ids are namespaced by reconstruction when indexed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{ImageId, LandmarkId, PointKey, ReconstructionId};

pub const CAMERAS_FILE: &str = "cameras.txt";
pub const IMAGES_FILE: &str = "images.txt";
pub const POINTS_FILE: &str = "points3D.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: u32,
    pub model: String,
    pub width: u32,
    pub height: u32,
    pub params: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub xy: [f64; 2],
    /// `None` for keypoints that were never triangulated (id `-1`).
    pub point3d_id: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservedPoint {
    pub keypoint_index: usize,
    pub point3d_id: u64,
    pub xy: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisteredImage {
    pub id: u32,
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    pub camera_id: u32,
    pub name: String,
    /// Full keypoint list, triangulated or not, in file order.
    pub keypoints: Vec<Keypoint>,
}

impl RegisteredImage {
    /// Triangulated keypoints only.
    pub fn observed_points(&self) -> impl Iterator<Item = ObservedPoint> + '_ {
        self.keypoints.iter().enumerate().filter_map(|(i, kp)| {
            kp.point3d_id.map(|id| ObservedPoint {
                keypoint_index: i,
                point3d_id: id,
                xy: kp.xy,
            })
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackElement {
    pub image_id: u32,
    pub keypoint_index: usize,
    pub xy: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point3D {
    pub id: u64,
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
    pub error: f64,
    pub track: Vec<TrackElement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub reconstruction_id: ReconstructionId,
    pub landmark_id: LandmarkId,
    pub cameras: BTreeMap<u32, Camera>,
    pub images: BTreeMap<u32, RegisteredImage>,
    pub points: BTreeMap<u64, Point3D>,
}

struct Lines<'a> {
    file: &'a str,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    keep_blank: bool,
}

impl<'a> Lines<'a> {
    fn new(file: &'a str, text: &'a str, keep_blank: bool) -> Self {
        Self {
            file,
            iter: text.lines().enumerate(),
            keep_blank,
        }
    }

    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_owned(),
            line,
            message: message.into(),
        }
    }
}

impl<'a> Iterator for Lines<'a> {
    /// (1-based line number, content)
    type Item = (usize, &'a str);

    fn next(&mut self) -> Option<Self::Item> {
        for (i, line) in self.iter.by_ref() {
            let trimmed = line.trim();
            if trimmed.starts_with('#') {
                continue;
            }
            if trimmed.is_empty() && !self.keep_blank {
                continue;
            }
            return Some((i + 1, trimmed));
        }
        None
    }
}

fn field<T: std::str::FromStr>(
    lines: &Lines<'_>,
    line: usize,
    tok: Option<&str>,
    what: &str,
) -> Result<T> {
    let tok = tok.ok_or_else(|| lines.err(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| lines.err(line, format!("invalid {what} `{tok}`")))
}

fn parse_cameras(text: &str) -> Result<BTreeMap<u32, Camera>> {
    let lines = Lines::new(CAMERAS_FILE, text, false);
    let mut cameras = BTreeMap::new();
    let rows: Vec<_> = Lines::new(CAMERAS_FILE, text, false).collect();
    for (ln, row) in rows {
        let mut toks = row.split_whitespace();
        let id: u32 = field(&lines, ln, toks.next(), "CAMERA_ID")?;
        let model: String = field(&lines, ln, toks.next(), "MODEL")?;
        let width = field(&lines, ln, toks.next(), "WIDTH")?;
        let height = field(&lines, ln, toks.next(), "HEIGHT")?;
        let params = toks
            .map(|t| field(&lines, ln, Some(t), "camera parameter"))
            .collect::<Result<Vec<f64>>>()?;
        let cam = Camera {
            id,
            model,
            width,
            height,
            params,
        };
        if cameras.insert(id, cam).is_some() {
            return Err(Error::Consistency(format!("duplicate camera id {id}")));
        }
    }
    Ok(cameras)
}

fn parse_images(text: &str) -> Result<BTreeMap<u32, RegisteredImage>> {
    let lines = Lines::new(IMAGES_FILE, text, true);
    let rows: Vec<_> = Lines::new(IMAGES_FILE, text, true).collect();
    let mut images = BTreeMap::new();
    let mut i = 0;
    while i < rows.len() {
        let (ln, header) = rows[i];
        if header.is_empty() {
            // blank line between records or trailing newline
            i += 1;
            continue;
        }
        let mut toks = header.splitn(10, char::is_whitespace).filter(|t| !t.is_empty());
        let id: u32 = field(&lines, ln, toks.next(), "IMAGE_ID")?;
        let mut qvec = [0.0; 4];
        for (k, q) in qvec.iter_mut().enumerate() {
            *q = field(&lines, ln, toks.next(), &format!("Q{k}"))?;
        }
        let mut tvec = [0.0; 3];
        for (k, t) in tvec.iter_mut().enumerate() {
            *t = field(&lines, ln, toks.next(), &format!("T{k}"))?;
        }
        let camera_id = field(&lines, ln, toks.next(), "CAMERA_ID")?;
        let name = toks
            .next()
            .map(str::trim)
            .filter(|n| !n.is_empty())
            .ok_or_else(|| lines.err(ln, "missing NAME"))?
            .to_owned();

        let mut keypoints = Vec::new();
        if let Some(&(pln, pts)) = rows.get(i + 1) {
            let toks: Vec<&str> = pts.split_whitespace().collect();
            if toks.len() % 3 != 0 {
                return Err(lines.err(pln, "keypoint line is not a multiple of (X Y POINT3D_ID)"));
            }
            for t in toks.chunks(3) {
                let x = field(&lines, pln, Some(t[0]), "X")?;
                let y = field(&lines, pln, Some(t[1]), "Y")?;
                let pid: i64 = field(&lines, pln, Some(t[2]), "POINT3D_ID")?;
                let point3d_id = match pid {
                    -1 => None,
                    p if p >= 0 => Some(p as u64),
                    p => return Err(lines.err(pln, format!("invalid POINT3D_ID {p}"))),
                };
                keypoints.push(Keypoint { xy: [x, y], point3d_id });
            }
        }
        i += 2;
        let img = RegisteredImage {
            id,
            qvec,
            tvec,
            camera_id,
            name,
            keypoints,
        };
        if images.insert(id, img).is_some() {
            return Err(Error::Consistency(format!("duplicate image id {id}")));
        }
    }
    Ok(images)
}

fn parse_points(text: &str) -> Result<Vec<(usize, Point3D)>> {
    let lines = Lines::new(POINTS_FILE, text, false);
    let rows: Vec<_> = Lines::new(POINTS_FILE, text, false).collect();
    let mut points = Vec::with_capacity(rows.len());
    for (ln, row) in rows {
        let toks: Vec<&str> = row.split_whitespace().collect();
        if toks.len() < 8 {
            return Err(lines.err(ln, "expected POINT3D_ID X Y Z R G B ERROR TRACK[]"));
        }
        if (toks.len() - 8) % 2 != 0 {
            return Err(lines.err(ln, "track is not a list of (IMAGE_ID POINT2D_IDX) pairs"));
        }
        let id = field(&lines, ln, Some(toks[0]), "POINT3D_ID")?;
        let xyz = [
            field(&lines, ln, Some(toks[1]), "X")?,
            field(&lines, ln, Some(toks[2]), "Y")?,
            field(&lines, ln, Some(toks[3]), "Z")?,
        ];
        let rgb = [
            field(&lines, ln, Some(toks[4]), "R")?,
            field(&lines, ln, Some(toks[5]), "G")?,
            field(&lines, ln, Some(toks[6]), "B")?,
        ];
        let error = field(&lines, ln, Some(toks[7]), "ERROR")?;
        let track = toks[8..]
            .chunks(2)
            .map(|t| {
                Ok(TrackElement {
                    image_id: field(&lines, ln, Some(t[0]), "IMAGE_ID")?,
                    keypoint_index: field(&lines, ln, Some(t[1]), "POINT2D_IDX")?,
                    xy: [f64::NAN; 2],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        points.push((
            ln,
            Point3D {
                id,
                xyz,
                rgb,
                error,
                track,
            },
        ));
    }
    Ok(points)
}

/// Parse the three text files of one reconstruction from memory.
pub fn parse_reconstruction_str(
    cameras: &str,
    images: &str,
    points: &str,
    landmark_id: LandmarkId,
    reconstruction_id: ReconstructionId,
) -> Result<Reconstruction> {
    let cameras = parse_cameras(cameras)?;
    let images = parse_images(images)?;
    for img in images.values() {
        if !cameras.contains_key(&img.camera_id) {
            return Err(Error::Consistency(format!(
                "image {} references unknown camera {}",
                img.id, img.camera_id
            )));
        }
    }

    let mut by_id: BTreeMap<u64, Point3D> = BTreeMap::new();
    for (ln, mut p) in parse_points(points)? {
        if p.track.len() < 2 {
            return Err(Error::Consistency(format!(
                "{POINTS_FILE}:{ln}: point {} has a track of length {} (< 2)",
                p.id,
                p.track.len()
            )));
        }
        for el in &mut p.track {
            let img = images.get(&el.image_id).ok_or_else(|| {
                Error::Consistency(format!(
                    "{POINTS_FILE}:{ln}: point {} tracks unknown image {}",
                    p.id, el.image_id
                ))
            })?;
            let kp = img.keypoints.get(el.keypoint_index).ok_or_else(|| {
                Error::Consistency(format!(
                    "{POINTS_FILE}:{ln}: keypoint {} out of range for image {}",
                    el.keypoint_index, el.image_id
                ))
            })?;
            if kp.point3d_id != Some(p.id) {
                return Err(Error::Consistency(format!(
                    "{POINTS_FILE}:{ln}: image {} keypoint {} does not observe point {}",
                    el.image_id, el.keypoint_index, p.id
                )));
            }
            el.xy = kp.xy;
        }
        let id = p.id;
        if by_id.insert(id, p).is_some() {
            return Err(Error::Consistency(format!(
                "{POINTS_FILE}:{ln}: duplicate point id {id}"
            )));
        }
    }

    // Reverse direction: every triangulated keypoint must appear in its track.
    for img in images.values() {
        for obs in img.observed_points() {
            let listed = by_id.get(&obs.point3d_id).is_some_and(|p| {
                p.track
                    .iter()
                    .any(|t| t.image_id == img.id && t.keypoint_index == obs.keypoint_index)
            });
            if !listed {
                return Err(Error::Consistency(format!(
                    "image {} keypoint {} claims point {} which does not list it",
                    img.id, obs.keypoint_index, obs.point3d_id
                )));
            }
        }
    }

    Ok(Reconstruction {
        reconstruction_id,
        landmark_id,
        cameras,
        images,
        points: by_id,
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_reconstruction(
    cameras_file: &Path,
    images_file: &Path,
    points_file: &Path,
    landmark_id: LandmarkId,
    reconstruction_id: ReconstructionId,
) -> Result<Reconstruction> {
    parse_reconstruction_str(
        &read(cameras_file)?,
        &read(images_file)?,
        &read(points_file)?,
        landmark_id,
        reconstruction_id,
    )
}

/// Read `cameras.txt`, `images.txt` and `points3D.txt` from `dir`.
pub fn read_reconstruction_dir(
    dir: &Path,
    landmark_id: LandmarkId,
    reconstruction_id: ReconstructionId,
) -> Result<Reconstruction> {
    parse_reconstruction(
        &dir.join(CAMERAS_FILE),
        &dir.join(IMAGES_FILE),
        &dir.join(POINTS_FILE),
        landmark_id,
        reconstruction_id,
    )
}

/// Read every reconstruction below `root`, laid out as
/// `root/<landmark_id>/<reconstruction_id>/{cameras,images,points3D}.txt`.
/// Directory order is sorted, so the result is deterministic.
pub fn read_reconstruction_tree(root: &Path) -> Result<Vec<Reconstruction>> {
    let mut out = Vec::new();
    for landmark in sorted_subdirs(root)? {
        let lm = LandmarkId::new(file_name(&landmark));
        for rdir in sorted_subdirs(&landmark)? {
            let rid = ReconstructionId::new(file_name(&rdir));
            out.push(read_reconstruction_dir(&rdir, lm.clone(), rid)?);
        }
    }
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

impl Reconstruction {
    pub fn cameras_text(&self) -> String {
        let mut s = String::from("# Camera list with one line of data per camera:\n");
        s.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
        let _ = writeln!(s, "# Number of cameras: {}", self.cameras.len());
        for c in self.cameras.values() {
            let _ = write!(s, "{} {} {} {}", c.id, c.model, c.width, c.height);
            for p in &c.params {
                let _ = write!(s, " {p}");
            }
            s.push('\n');
        }
        s
    }

    pub fn images_text(&self) -> String {
        let mut s = String::from("# Image list with two lines of data per image:\n");
        s.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
        s.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
        let _ = writeln!(s, "# Number of images: {}", self.images.len());
        for img in self.images.values() {
            let [qw, qx, qy, qz] = img.qvec;
            let [tx, ty, tz] = img.tvec;
            let _ = writeln!(
                s,
                "{} {qw} {qx} {qy} {qz} {tx} {ty} {tz} {} {}",
                img.id, img.camera_id, img.name
            );
            let mut first = true;
            for kp in &img.keypoints {
                if !first {
                    s.push(' ');
                }
                first = false;
                let pid = kp.point3d_id.map_or(-1, |p| p as i64);
                let _ = write!(s, "{} {} {pid}", kp.xy[0], kp.xy[1]);
            }
            s.push('\n');
        }
        s
    }

    pub fn points_text(&self) -> String {
        let mut s = String::from("# 3D point list with one line of data per point:\n");
        s.push_str("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
        let _ = writeln!(s, "# Number of points: {}", self.points.len());
        for p in self.points.values() {
            let [x, y, z] = p.xyz;
            let [r, g, b] = p.rgb;
            let _ = write!(s, "{} {x} {y} {z} {r} {g} {b} {}", p.id, p.error);
            for t in &p.track {
                let _ = write!(s, " {} {}", t.image_id, t.keypoint_index);
            }
            s.push('\n');
        }
        s
    }

    /// Write the three text files into `dir`, creating it if needed.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            (CAMERAS_FILE, self.cameras_text()),
            (IMAGES_FILE, self.images_text()),
            (POINTS_FILE, self.points_text()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn image_by_name(&self, name: &str) -> Option<&RegisteredImage> {
        self.images.values().find(|i| i.name == name)
    }

    pub fn num_observations(&self) -> usize {
        self.images.values().map(|i| i.observed_points().count()).sum()
    }

    pub fn num_track_elements(&self) -> usize {
        self.points.values().map(|p| p.track.len()).sum()
    }
}

/// Unordered image pair key, stored as (min, max) of interned indices.
type PairKey = (u32, u32);

fn pair_key(a: u32, b: u32) -> PairKey {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Immutable index of point tracks across a set of reconstructions.
#[derive(Clone, Debug, Default)]
pub struct TrackIndex {
    images: Vec<ImageId>,
    lookup: HashMap<ImageId, u32>,
    sizes: Vec<(u32, u32)>,
    by_image: Vec<BTreeSet<PointKey>>,
    by_point: BTreeMap<PointKey, Vec<(u32, [f64; 2])>>,
    pair_counts: HashMap<PairKey, u32>,
    reconstructions: Vec<(ReconstructionId, LandmarkId)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub reconstructions: usize,
    pub images: usize,
    pub points: usize,
    pub observations: usize,
    pub indexed_pairs: usize,
    pub max_shared_keypoints: u32,
}

/// Build the track index. Point ids are namespaced by the reconstruction's
/// position in `recs`; two reconstructions with the same id are rejected.
pub fn build_track_index(recs: &[Reconstruction]) -> Result<TrackIndex> {
    let mut idx = TrackIndex::default();
    let mut seen = BTreeSet::new();
    for (r, rec) in recs.iter().enumerate() {
        if !seen.insert(&rec.reconstruction_id) {
            return Err(Error::Consistency(format!(
                "reconstruction id `{}` appears twice; point ids would collide",
                rec.reconstruction_id
            )));
        }
        idx.reconstructions
            .push((rec.reconstruction_id.clone(), rec.landmark_id.clone()));
        let mut local: HashMap<u32, u32> = HashMap::new();
        for img in rec.images.values() {
            let id = ImageId::new(img.name.clone());
            let slot = match idx.lookup.get(&id) {
                Some(&s) => s,
                None => {
                    let s = idx.images.len() as u32;
                    let cam = &rec.cameras[&img.camera_id];
                    idx.images.push(id.clone());
                    idx.sizes.push((cam.width, cam.height));
                    idx.by_image.push(BTreeSet::new());
                    idx.lookup.insert(id, s);
                    s
                }
            };
            local.insert(img.id, slot);
        }
        for p in rec.points.values() {
            let key = PointKey {
                recon: r as u32,
                point: p.id,
            };
            let mut obs: Vec<(u32, [f64; 2])> = Vec::with_capacity(p.track.len());
            for t in &p.track {
                let slot = local[&t.image_id];
                idx.by_image[slot as usize].insert(key);
                if !obs.iter().any(|(s, _)| *s == slot) {
                    obs.push((slot, t.xy));
                }
            }
            for i in 0..obs.len() {
                for j in (i + 1)..obs.len() {
                    *idx.pair_counts.entry(pair_key(obs[i].0, obs[j].0)).or_insert(0) += 1;
                }
            }
            idx.by_point.insert(key, obs);
        }
    }
    Ok(idx)
}

impl TrackIndex {
    fn slot(&self, id: &ImageId) -> Result<u32> {
        self.lookup
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.lookup.contains_key(id)
    }

    /// Indexed images in first-seen order.
    pub fn images(&self) -> &[ImageId] {
        &self.images
    }

    pub fn reconstructions(&self) -> &[(ReconstructionId, LandmarkId)] {
        &self.reconstructions
    }

    /// Image (width, height) from its camera.
    pub fn image_size(&self, id: &ImageId) -> Result<(u32, u32)> {
        Ok(self.sizes[self.slot(id)? as usize])
    }

    pub fn by_image(&self, id: &ImageId) -> Result<&BTreeSet<PointKey>> {
        Ok(&self.by_image[self.slot(id)? as usize])
    }

    /// Observations of a point as (image, pixel).
    pub fn by_point(&self, key: PointKey) -> Option<Vec<(&ImageId, [f64; 2])>> {
        self.by_point.get(&key).map(|obs| {
            obs.iter()
                .map(|(s, xy)| (&self.images[*s as usize], *xy))
                .collect()
        })
    }

    /// Pixel at which `image` observes `key`.
    pub fn pixel(&self, key: PointKey, image: &ImageId) -> Option<[f64; 2]> {
        let slot = *self.lookup.get(image)?;
        self.by_point
            .get(&key)?
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, xy)| *xy)
    }

    pub fn points(&self) -> impl Iterator<Item = PointKey> + '_ {
        self.by_point.keys().copied()
    }

    pub fn shared_keypoints(&self, a: &ImageId, b: &ImageId) -> Result<usize> {
        let (sa, sb) = (self.slot(a)?, self.slot(b)?);
        if sa == sb {
            return Ok(self.by_image[sa as usize].len());
        }
        Ok(self.pair_counts.get(&pair_key(sa, sb)).copied().unwrap_or(0) as usize)
    }

    /// Shared point ids of two images, in ascending key order.
    pub fn shared_points(&self, a: &ImageId, b: &ImageId) -> Result<Vec<PointKey>> {
        let pa = self.by_image(a)?;
        let pb = self.by_image(b)?;
        Ok(pa.intersection(pb).copied().collect())
    }

    /// |A ∩ B| / |A ∪ B| over observed point sets, as an exact ratio.
    /// An empty union yields 0.
    pub fn keypoint_iou_exact(&self, a: &ImageId, b: &ImageId) -> Result<Ratio<u64>> {
        let inter = self.shared_keypoints(a, b)? as u64;
        let union = (self.by_image(a)?.len() + self.by_image(b)?.len()) as u64 - inter;
        if union == 0 {
            return Ok(Ratio::from_integer(0));
        }
        Ok(Ratio::new(inter, union))
    }

    pub fn keypoint_iou(&self, a: &ImageId, b: &ImageId) -> Result<f64> {
        let r = self.keypoint_iou_exact(a, b)?;
        Ok(*r.numer() as f64 / *r.denom() as f64)
    }

    /// Every indexed pair with its shared count, sorted by image ids.
    pub fn pairs(&self) -> Vec<((&ImageId, &ImageId), usize)> {
        let mut out: Vec<_> = self
            .pair_counts
            .iter()
            .map(|(&(a, b), &n)| {
                let (ia, ib) = (&self.images[a as usize], &self.images[b as usize]);
                let key = if ia <= ib { (ia, ib) } else { (ib, ia) };
                (key, n as usize)
            })
            .collect();
        out.sort();
        out
    }

    pub fn stats(&self) -> IndexStats {
        IndexStats {
            reconstructions: self.reconstructions.len(),
            images: self.images.len(),
            points: self.by_point.len(),
            observations: self.by_image.iter().map(BTreeSet::len).sum(),
            indexed_pairs: self.pair_counts.len(),
            max_shared_keypoints: self.pair_counts.values().copied().max().unwrap_or(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAMS: &str = "# cams\n1 PINHOLE 64 48 50 50 32 24\n";

    fn two_view() -> Reconstruction {
        let images = "\
# Image list
1 1 0 0 0 0 0 0 1 a.jpg
10 10 1 5 5 -1 20 20 2 30 30 3
2 1 0 0 0 1 0 0 1 b.jpg
11 11 1 21 21 2 31 31 3 6 6 -1
";
        let points = "\
# points
1 0 0 1 255 0 0 0.5 1 0 2 0
2 1 0 1 0 255 0 0.5 1 2 2 1
3 0 1 1 0 0 255 0.5 1 3 2 2
";
        parse_reconstruction_str(CAMS, images, points, "lm".into(), "r0".into()).unwrap()
    }

    #[test]
    fn parses_minimal_two_view_fixture() {
        let rec = two_view();
        assert_eq!(rec.points.len(), 3);
        assert!(rec.points.values().all(|p| p.track.len() == 2));
        // -1 keypoints are dropped from the observed set
        assert_eq!(rec.images[&1].observed_points().count(), 3);
        assert_eq!(rec.images[&1].keypoints.len(), 4);
        assert_eq!(rec.points[&2].track[1].xy, [21.0, 21.0]);
        assert_eq!(rec.num_observations(), rec.num_track_elements());
    }

    #[test]
    fn header_only_points_file_is_empty() {
        let images = "1 1 0 0 0 0 0 0 1 a.jpg\n\n";
        let rec =
            parse_reconstruction_str(CAMS, images, "# nothing\n", "lm".into(), "r".into()).unwrap();
        assert!(rec.points.is_empty());
        assert_eq!(rec.images.len(), 1);
        assert!(rec.images[&1].keypoints.is_empty());
    }

    #[test]
    fn track_citing_unknown_image_is_rejected() {
        let images = "1 1 0 0 0 0 0 0 1 a.jpg\n1 1 1\n";
        let points = "1 0 0 0 0 0 0 0 1 0 9 0\n";
        let err = parse_reconstruction_str(CAMS, images, points, "lm".into(), "r".into())
            .unwrap_err();
        assert!(matches!(err, Error::Consistency(_)), "{err}");
    }

    #[test]
    fn duplicate_point_is_rejected() {
        let images = "1 1 0 0 0 0 0 0 1 a.jpg\n1 1 1\n2 1 0 0 0 0 0 0 1 b.jpg\n1 1 1\n";
        let points = "1 0 0 0 0 0 0 0 1 0 2 0\n1 0 0 0 0 0 0 0 1 0 2 0\n";
        let err = parse_reconstruction_str(CAMS, images, points, "lm".into(), "r".into())
            .unwrap_err();
        assert!(err.to_string().contains("duplicate point"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let images = "# c\n1 1 0 0 0 0 0 0 1 a.jpg\n1 1 1\n";
        let points = "# c\n# c\n1 0 zero 0 0 0 0 0 1 0\n";
        let err = parse_reconstruction_str(CAMS, images, points, "lm".into(), "r".into())
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn short_track_is_rejected() {
        let images = "1 1 0 0 0 0 0 0 1 a.jpg\n1 1 1\n";
        let points = "1 0 0 0 0 0 0 0 1 0\n";
        assert!(parse_reconstruction_str(CAMS, images, points, "lm".into(), "r".into()).is_err());
    }

    #[test]
    fn unlisted_keypoint_claim_is_rejected() {
        let images = "1 1 0 0 0 0 0 0 1 a.jpg\n1 1 1 2 2 7\n2 1 0 0 0 0 0 0 1 b.jpg\n1 1 1\n";
        let points = "1 0 0 0 0 0 0 0 1 0 2 0\n";
        assert!(parse_reconstruction_str(CAMS, images, points, "lm".into(), "r".into()).is_err());
    }

    #[test]
    fn text_round_trip_is_fixed_point() {
        let rec = two_view();
        let again = parse_reconstruction_str(
            &rec.cameras_text(),
            &rec.images_text(),
            &rec.points_text(),
            "lm".into(),
            "r0".into(),
        )
        .unwrap();
        assert_eq!(rec, again);
    }

    #[test]
    fn index_counts_pairs_and_self_intersection() {
        let idx = build_track_index(&[two_view()]).unwrap();
        let (a, b) = (ImageId::from("a.jpg"), ImageId::from("b.jpg"));
        assert_eq!(idx.shared_keypoints(&a, &b).unwrap(), 3);
        assert_eq!(idx.shared_keypoints(&b, &a).unwrap(), 3);
        assert_eq!(idx.shared_keypoints(&a, &a).unwrap(), 3);
        assert_eq!(idx.keypoint_iou(&a, &b).unwrap(), 1.0);
        assert_eq!(idx.keypoint_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(idx.image_size(&a).unwrap(), (64, 48));
        assert!(matches!(
            idx.shared_keypoints(&a, &"zz".into()),
            Err(Error::UnknownImage(_))
        ));
    }

    #[test]
    fn duplicate_reconstruction_id_is_an_error() {
        let r = two_view();
        assert!(build_track_index(&[r.clone(), r]).is_err());
    }

    #[test]
    fn namespaced_reconstructions_do_not_collide() {
        let r0 = two_view();
        let mut r1 = two_view();
        r1.reconstruction_id = "r1".into();
        let idx = build_track_index(&[r0, r1]).unwrap();
        // same image names in both reconstructions: counts sum
        assert_eq!(idx.shared_keypoints(&"a.jpg".into(), &"b.jpg".into()).unwrap(), 6);
        assert_eq!(idx.stats().points, 6);
    }
}
