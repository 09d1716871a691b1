//! Built-in verification suites: finite-difference gradient checks of every
//! loss, closed-form loss values, and brute-force oracles for the counting
//! and ranking metrics. Shared by the test suite and the `selftest` command.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluation::{average_precision, recall_at_k, semantic_s, RankedRetrieval};
use crate::ids::{ImageId, LandmarkId};
use crate::mining::{build_adjacency_graph, graph_density, graph_density_exact, CandidateConcept};
use crate::numerics::{
    classification_loss, grad_check, image_cross_entropy, mse_loss, nce_loss,
    nce_loss_unchecked, triplet_loss, Aggregator, Phase, ScoreMaps, TripletForm,
};
use crate::rng::rng_from_seed;
use crate::sfm::{
    build_track_index, Camera, Keypoint, Point3D, Reconstruction, RegisteredImage, TrackElement,
};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-4;
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-9;
pub const ORACLE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst observed error, where the check has one.
    pub worst: Option<f64>,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, worst: Option<f64>, detail: String) -> Self {
        Self {
            name: name.to_owned(),
            passed,
            worst,
            detail,
        }
    }
}

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// L(x) − L(x0) for the contrastive loss, computed from similarity deltas so
/// the central difference is not lost in the rounding of L itself.
pub fn nce_delta(x0: &[f64], x: &[f64], d: usize, tau: f64) -> f64 {
    let partners = (x.len() - d) / d;
    let (p0, p) = (&x0[..d], &x[..d]);
    let mut phi0 = Vec::with_capacity(partners);
    let mut dphi = Vec::with_capacity(partners);
    for j in 0..partners {
        let r = d * (j + 1)..d * (j + 2);
        let (q0, q) = (&x0[r.clone()], &x[r]);
        phi0.push((0..d).map(|i| p0[i] * q0[i]).sum::<f64>() / tau);
        // a·b − a0·b0 = (a − a0)·b + a0·(b − b0)
        dphi.push((0..d).map(|i| (p[i] - p0[i]) * q[i] + p0[i] * (q[i] - q0[i])).sum::<f64>() / tau);
    }
    let max = phi0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = phi0.iter().map(|v| (v - max).exp()).collect();
    let s0: f64 = w.iter().sum();
    let rel: f64 = w.iter().zip(&dphi).map(|(w, dp)| w * dp.exp_m1()).sum::<f64>() / s0;
    rel.ln_1p() - dphi[0]
}

fn nce_flat(x0: &[f64], x: &[f64], d: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    let negs: Vec<&[f64]> = x[2 * d..].chunks(d).collect();
    let out = nce_loss_unchecked(&x[..d], &x[d..2 * d], &negs, tau)?;
    let mut g = out.grad_p;
    g.extend(out.grad_p_plus);
    for n in out.grad_negatives {
        g.extend(n);
    }
    Ok((nce_delta(x0, x, d, tau), g))
}

fn summarize(name: &str, errors: &[f64], skipped: usize) -> CheckOutcome {
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let passed = !errors.is_empty() && worst < GRAD_TOLERANCE;
    CheckOutcome::new(
        name,
        passed,
        Some(worst),
        format!("{} draws, {skipped} skipped near a kink, max rel err {worst:.2e}", errors.len()),
    )
}

/// Analytic against central-difference gradients, one outcome per loss.
pub fn gradient_suite(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let d = 32;
    let mut out = Vec::new();

    let m = 16;
    let mut errs = Vec::new();
    for seed in 0..seeds {
        let mut rng = rng_from_seed(seed);
        let x: Vec<f64> = (0..m + 2).flat_map(|_| unit(&mut rng, d)).collect();
        errs.push(grad_check(|p| nce_flat(&x, p, d, 0.07), &x, GRAD_EPS)?);
    }
    out.push(summarize("nce_loss", &errs, 0));

    let mut errs = Vec::new();
    for seed in 0..seeds {
        let mut rng = rng_from_seed(1000 + seed);
        let x: Vec<f64> = (0..2).flat_map(|_| unit(&mut rng, d)).collect();
        let f = |x: &[f64]| {
            let o = mse_loss(&x[..d], &x[d..])?;
            let mut g = o.grad_p;
            g.extend(o.grad_p_plus);
            Ok((o.loss, g))
        };
        errs.push(grad_check(f, &x, GRAD_EPS)?);
    }
    out.push(summarize("mse_loss", &errs, 0));

    for form in [TripletForm::Standard, TripletForm::AsPrinted] {
        let (mut errs, mut skipped) = (Vec::new(), 0);
        for seed in 0..seeds {
            let mut rng = rng_from_seed(2000 + seed);
            let x: Vec<f64> = (0..3)
                .flat_map(|_| unit(&mut rng, d).into_iter().map(|v| v * 2.0).collect::<Vec<_>>())
                .collect();
            let dist = |o: usize| (0..d).map(|i| (x[i] - x[o * d + i]).powi(2)).sum::<f64>();
            let raw = match form {
                TripletForm::Standard => dist(1) - dist(2) + 3.0,
                TripletForm::AsPrinted => dist(2) - dist(1) + 3.0,
            };
            if raw.abs() < 1e-2 {
                skipped += 1;
                continue;
            }
            let f = |x: &[f64]| {
                let o = triplet_loss(&x[..d], &x[d..2 * d], &x[2 * d..], 3.0, form)?;
                let mut g = o.grad_p;
                g.extend(o.grad_p_plus);
                g.extend(o.grad_p_minus);
                Ok((o.loss, g))
            };
            errs.push(grad_check(f, &x, GRAD_EPS)?);
        }
        let name = match form {
            TripletForm::Standard => "triplet_loss",
            TripletForm::AsPrinted => "triplet_loss (printed sign)",
        };
        out.push(summarize(name, &errs, skipped));
    }

    let (classes, h, w) = (10, 4, 4);
    for (name, agg) in [
        ("classification_loss (ngwp)", Aggregator::default()),
        ("classification_loss (mean pool)", Aggregator::MeanPool),
    ] {
        let mut errs = Vec::new();
        for seed in 0..seeds {
            let mut rng = rng_from_seed(3000 + seed);
            let x: Vec<f64> = (0..(classes + 1) * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let label = rng.gen_range(0..classes);
            for phase in [Phase::Pretrain, Phase::Full] {
                let f = |x: &[f64]| {
                    let maps = ScoreMaps::from_scores(x.to_vec(), classes, h, w, &agg)?;
                    let o = classification_loss(&maps, &[label], phase, 0.6, &agg)?;
                    Ok((o.loss, o.grad_scores))
                };
                errs.push(grad_check(f, &x, GRAD_EPS)?);
            }
        }
        out.push(summarize(name, &errs, 0));
    }
    Ok(out)
}

/// Uniform similarities give ln(m + 1); uniform image scores give ln(C).
pub fn closed_form_suite() -> Result<Vec<CheckOutcome>> {
    let d = 8;
    let mut f = vec![0.0; d];
    f[0] = 1.0;
    let negs: Vec<&[f64]> = vec![f.as_slice(); 16];
    let nce = nce_loss(&f, &f, &negs, 0.07)?.loss;
    let e1 = (nce - 17f64.ln()).abs();
    let ce = image_cross_entropy(&[0.25f64; 10], 3);
    let e2 = (ce - 10f64.ln()).abs();
    Ok(vec![
        CheckOutcome::new(
            "uniform NCE = ln 17",
            e1 < CLOSED_FORM_TOLERANCE,
            Some(e1),
            format!("{nce:.12}"),
        ),
        CheckOutcome::new(
            "uniform CE = ln 10",
            e2 < CLOSED_FORM_TOLERANCE,
            Some(e2),
            format!("{ce:.12}"),
        ),
    ])
}

/// A random single reconstruction plus the raw observation sets it encodes.
pub struct RandomScene {
    pub reconstruction: Reconstruction,
    pub observations: BTreeMap<ImageId, BTreeSet<u64>>,
}

/// `n_images` images over `n_points` points; every point is seen by at
/// least two images.
pub fn random_scene(rng: &mut impl Rng, n_images: usize, n_points: usize) -> RandomScene {
    let names: Vec<String> = (0..n_images).map(|i| format!("img{i:02}")).collect();
    let all: Vec<usize> = (0..n_images).collect();
    let mut tracks = Vec::with_capacity(n_points);
    let mut pixels = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let k = rng.gen_range(2..=n_images.max(2));
        let mut seen: Vec<usize> = all.choose_multiple(rng, k.min(n_images)).copied().collect();
        seen.sort_unstable();
        pixels.push(
            seen.iter()
                .map(|_| [rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0)])
                .collect::<Vec<_>>(),
        );
        tracks.push(seen);
    }
    scene_with_pixels(&names, &tracks, Some(&pixels))
}

/// One 32x32 reconstruction in which point `j` (id `j + 1`) is observed by
/// the images indexed by `tracks[j]`, at the image centre.
pub fn scene_from_tracks(names: &[String], tracks: &[Vec<usize>]) -> RandomScene {
    scene_with_pixels(names, tracks, None)
}

fn scene_with_pixels(
    names: &[String],
    tracks: &[Vec<usize>],
    pixels: Option<&[Vec<[f64; 2]>]>,
) -> RandomScene {
    let mut keypoints: Vec<Vec<Keypoint>> = vec![Vec::new(); names.len()];
    let mut points = BTreeMap::new();
    let mut observations: BTreeMap<ImageId, BTreeSet<u64>> =
        names.iter().map(|n| (ImageId::new(n.clone()), BTreeSet::new())).collect();
    for (j, seen) in tracks.iter().enumerate() {
        let pid = j as u64 + 1;
        let mut track = Vec::new();
        for (t, &i) in seen.iter().enumerate() {
            let xy = pixels.map_or([16.0, 16.0], |p| p[j][t]);
            track.push(TrackElement {
                image_id: i as u32 + 1,
                keypoint_index: keypoints[i].len(),
                xy,
            });
            keypoints[i].push(Keypoint {
                xy,
                point3d_id: Some(pid),
            });
            observations.get_mut(&ImageId::new(names[i].clone())).map(|s| s.insert(pid));
        }
        points.insert(
            pid,
            Point3D {
                id: pid,
                xyz: [0.0; 3],
                rgb: [0; 3],
                error: 0.0,
                track,
            },
        );
    }
    let images = keypoints
        .into_iter()
        .enumerate()
        .map(|(i, kps)| {
            let id = i as u32 + 1;
            let img = RegisteredImage {
                id,
                qvec: [1.0, 0.0, 0.0, 0.0],
                tvec: [0.0; 3],
                camera_id: 1,
                name: names[i].clone(),
                keypoints: kps,
            };
            (id, img)
        })
        .collect();
    let cameras = BTreeMap::from([(
        1,
        Camera {
            id: 1,
            model: "PINHOLE".into(),
            width: 32,
            height: 32,
            params: vec![32.0, 32.0, 16.0, 16.0],
        },
    )]);
    RandomScene {
        reconstruction: Reconstruction {
            reconstruction_id: "r0".into(),
            landmark_id: "lm".into(),
            cameras,
            images,
            points,
        },
        observations,
    }
}

fn brute_rank(scores: &[f64], keys: &[String], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && keys[j] < keys[i]))
        .count()
}

fn brute_ap(scores: &[f64], positives: &[bool], keys: &[String]) -> f64 {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| positives[i]).collect();
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let r = brute_rank(scores, keys, i);
            let above = pos.iter().filter(|&&j| brute_rank(scores, keys, j) <= r).count();
            above as f64 / r as f64
        })
        .sum();
    total / pos.len() as f64
}

fn random_retrievals(rng: &mut impl Rng, n: usize) -> (Vec<RankedRetrieval>, BTreeMap<ImageId, BTreeSet<String>>) {
    let pool: Vec<ImageId> = (0..n).map(|i| ImageId::new(format!("p{i:02}"))).collect();
    let classes = ["altar", "nave", "portal"];
    let mut labels: BTreeMap<ImageId, BTreeSet<String>> = BTreeMap::new();
    for id in &pool {
        if rng.gen_bool(0.7) {
            let l = classes.iter().filter(|_| rng.gen_bool(0.4)).map(|c| c.to_string()).collect();
            labels.insert(id.clone(), l);
        }
    }
    let queries = rng.gen_range(1..=n);
    let retrievals = (0..queries)
        .map(|q| {
            let mut ranking = pool.clone();
            ranking.shuffle(rng);
            let target = pool[rng.gen_range(0..n)].clone();
            let target_label = rng
                .gen_bool(0.8)
                .then(|| classes[rng.gen_range(0..classes.len())].to_string());
            RankedRetrieval {
                query_id: format!("q{q}"),
                ranking,
                target,
                target_label,
            }
        })
        .collect();
    (retrievals, labels)
}

/// Library results against brute-force recomputation on `instances` random
/// small problems each (at most 30 elements).
pub fn oracle_suite(instances: u64, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = rng_from_seed(seed);
    let mut fails: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut note = |name: &'static str, ok: bool, what: String| {
        let e = fails.entry(name).or_default();
        if !ok {
            e.push(what);
        }
    };

    for inst in 0..instances {
        let (n, np) = (rng.gen_range(2..=30), rng.gen_range(1..=30));
        let scene = random_scene(&mut rng, n, np);
        let index = build_track_index(std::slice::from_ref(&scene.reconstruction))?;
        let obs = &scene.observations;
        let ids: Vec<&ImageId> = obs.keys().collect();

        let mut shared_ok = true;
        let mut iou_ok = true;
        for a in &ids {
            for b in &ids {
                let inter = obs[*a].intersection(&obs[*b]).count();
                let union = obs[*a].union(&obs[*b]).count();
                shared_ok &= index.shared_keypoints(a, b)? == inter;
                let want = if union == 0 {
                    Ratio::from_integer(0)
                } else {
                    Ratio::new(inter as u64, union as u64)
                };
                let fw = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
                iou_ok &= index.keypoint_iou_exact(a, b)? == want
                    && (index.keypoint_iou(a, b)? - fw).abs() <= ORACLE_TOLERANCE;
            }
        }
        note("shared keypoints", shared_ok, format!("instance {inst}"));
        note("keypoint IoU", iou_ok, format!("instance {inst}"));

        // density over a random node subset of one landmark
        let k = rng.gen_range(1..=4);
        let members: BTreeSet<ImageId> = ids.iter().filter(|_| rng.gen_bool(0.7)).map(|i| (*i).clone()).collect();
        if members.len() >= 2 {
            let lm = LandmarkId::new("lm");
            let cand = CandidateConcept {
                noun: "nave".into(),
                per_landmark_images: BTreeMap::from([(lm.clone(), members.clone())]),
            };
            let g = build_adjacency_graph(&cand, &lm, &index, k)?;
            let m: Vec<&ImageId> = members.iter().collect();
            let mut edges = 0u64;
            for i in 0..m.len() {
                for j in i + 1..m.len() {
                    edges += (obs[m[i]].intersection(&obs[m[j]]).count() >= k) as u64;
                }
            }
            let v = m.len() as u64;
            let want = Ratio::new(2 * edges, v * (v - 1));
            let ok = graph_density_exact(&g)? == want
                && (graph_density(&g)? - 2.0 * edges as f64 / (v * (v - 1)) as f64).abs() <= ORACLE_TOLERANCE;
            note("graph density", ok, format!("instance {inst}"));
        }

        // AP with heavy ties
        let len = rng.gen_range(1..=30);
        let scores: Vec<f64> = (0..len).map(|_| rng.gen_range(0..5) as f64 * 0.25).collect();
        let mut positives: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.4)).collect();
        positives[rng.gen_range(0..len)] = true;
        let mut keys: Vec<String> = (0..len).map(|i| format!("k{i:02}")).collect();
        keys.shuffle(&mut rng);
        let got = average_precision(&scores, &positives, &keys)?;
        let want = brute_ap(&scores, &positives, &keys);
        note("average precision", (got - want).abs() <= ORACLE_TOLERANCE, format!("instance {inst}: {got} vs {want}"));

        let pool = rng.gen_range(1..=30);
        let (retrievals, labels) = random_retrievals(&mut rng, pool);
        let kk = rng.gen_range(1..=10);
        let mut hits = 0usize;
        for r in &retrievals {
            let mut found = false;
            for (pos, id) in r.ranking.iter().enumerate() {
                if pos < kk && *id == r.target {
                    found = true;
                }
            }
            hits += found as usize;
        }
        let want = hits as f64 / retrievals.len() as f64;
        let got = recall_at_k(&retrievals, kk)?;
        note("recall@K", (got - want).abs() <= ORACLE_TOLERANCE, format!("instance {inst}"));

        let mut per: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for r in &retrievals {
            let Some(t) = &r.target_label else { continue };
            let mut ok = 0.0;
            for id in &r.ranking[..kk.min(r.ranking.len())] {
                if labels.get(id).map(|l| l.contains(t)).unwrap_or(false) {
                    ok = 1.0;
                }
            }
            let e = per.entry(t.clone()).or_insert((0.0, 0.0));
            e.0 += ok;
            e.1 += 1.0;
        }
        match semantic_s(&retrievals, &labels, kk) {
            Ok(s) if !per.is_empty() => {
                let want_s = per.values().map(|(h, n)| h / n).sum::<f64>() / per.len() as f64;
                let (h, n) = per.values().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
                let ok = (s.s - want_s).abs() <= ORACLE_TOLERANCE
                    && (s.s_pooled - h / n).abs() <= ORACLE_TOLERANCE
                    && s.per_class.len() == per.len();
                note("semantic S", ok, format!("instance {inst}"));
            }
            Err(_) if per.is_empty() => note("semantic S", true, String::new()),
            _ => note("semantic S", false, format!("instance {inst}: defined-ness differs")),
        }
    }

    Ok(fails
        .into_iter()
        .map(|(name, f)| {
            let detail = if f.is_empty() {
                format!("{instances} instances agree")
            } else {
                format!("{} mismatches, first: {}", f.len(), f[0])
            };
            CheckOutcome::new(name, f.is_empty(), None, detail)
        })
        .collect())
}

/// Every suite at its full size.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = gradient_suite(100)?;
    out.extend(closed_form_suite()?);
    out.extend(oracle_suite(50, seed)?);
    Ok(out)
}
