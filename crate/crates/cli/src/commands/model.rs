use std::collections::{BTreeMap, BTreeSet};

use babel_core::corpus::read_jsonl;
use babel_core::evaluation::{
    classification_report, mean_seg_metrics, pct, recall_at_k, semantic_s, ClassificationReport,
    RankedRetrieval, SegMetrics,
};
use babel_core::fusion::{delta, export_ply, fuse_reconstruction, reconstruction_delta, theta, default_palette};
use babel_core::ids::ImageId;
use babel_core::labeling::{LabeledImage, Split};
use babel_core::rng::{derive_seed, stage_rng};
use babel_core::trainer::{
    decode_checkpoint, encode_checkpoint, image_label, segment_2d, train, ToyModel, TrainingData,
    STRIDE,
};
use babel_core::Scalar;
use serde::{Deserialize, Serialize};

use super::{
    image_truth, print_table, read_pairs, Ctx, CHECKPOINT_FILE, CLASSES_FILE, FUSION_SUMMARY_FILE,
};
use crate::error::{CliError, CliResult};

fn classes(ctx: &Ctx) -> CliResult<Vec<String>> {
    let p = ctx.stage_file(CLASSES_FILE, "train-toy")?;
    Ok(serde_json::from_slice(&std::fs::read(p)?)?)
}

fn model<T: Scalar>(ctx: &Ctx) -> CliResult<ToyModel<T>> {
    let p = ctx.stage_file(CHECKPOINT_FILE, "train-toy")?;
    Ok(decode_checkpoint(&std::fs::read(p)?)?)
}

pub fn train_toy<T: Scalar>(ctx: &Ctx) -> CliResult<()> {
    let mut out = ctx.run_dir("train")?;
    let classes = ctx.concepts()?.nouns();
    if classes.is_empty() {
        return Err(babel_core::Error::Insufficient("the mined concept set is empty".into()).into());
    }
    let labels_all = ctx.labels()?;
    let singles = ctx.training_singles(&labels_all)?;
    let real_pairs = read_pairs(ctx)?;
    let (_, index) = ctx.index()?;

    let class_of = |c: &str| classes.iter().position(|x| x == c);
    let mut labels: BTreeMap<ImageId, usize> = BTreeMap::new();
    for l in labels_all.iter().filter(|l| l.split == Split::Train) {
        if let Some(k) = l.single_label().and_then(class_of) {
            labels.insert(l.image_id.clone(), k);
        }
    }
    let single_ids: Vec<ImageId> = singles.into_iter().map(|(id, _)| id).collect();
    let needed: BTreeSet<ImageId> = single_ids
        .iter()
        .chain(real_pairs.iter().flat_map(|p| [&p.image_a, &p.image_b]))
        .cloned()
        .collect();
    let images = ctx.load_images::<T>(needed)?;

    let model = ToyModel::<T>::init(
        ctx.cfg.model.with_classes(classes.len()),
        &mut stage_rng(ctx.cfg.seed, "train/init"),
    )?;
    let data = TrainingData {
        index: &index,
        images: &images,
        labels: &labels,
        real_pairs: &real_pairs,
        singles: &single_ids,
    };
    let outcome = train(model, &data, &ctx.cfg.train, derive_seed(ctx.cfg.seed, "train/loop"))?;
    out.write(CHECKPOINT_FILE, &encode_checkpoint(&outcome.model)?)?;
    out.write_jsonl("train/trace.jsonl", &outcome.trace)?;
    out.write_json(CLASSES_FILE, &classes)?;
    if let Some(last) = outcome.trace.last() {
        println!(
            "trained {} steps on {} pairs / {} singles: final loss {:.4} (cls {:.4} + pix {:.4}, 3d {:.4})",
            outcome.trace.len(),
            real_pairs.len(),
            single_ids.len(),
            last.total,
            last.l_cls_im,
            last.l_cls_pix,
            last.l_3d
        );
    }
    out.finish()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudSummary {
    pub reconstruction_id: String,
    pub landmark_id: String,
    pub points: usize,
    /// Keyed by φ as written in the config.
    pub ambiguous: BTreeMap<String, usize>,
    pub delta: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSummary {
    pub concepts: Vec<String>,
    pub phi: Vec<f64>,
    pub theta: BTreeMap<String, f64>,
    /// `None` when no reconstruction has a polarized point.
    pub delta: BTreeMap<String, Option<f64>>,
    pub clouds: Vec<CloudSummary>,
}

fn phi_key(phi: f64) -> String {
    format!("{phi}")
}

pub fn fuse<T: Scalar>(ctx: &Ctx) -> CliResult<()> {
    let mut out = ctx.run_dir("fuse")?;
    let model = model::<T>(ctx)?;
    let classes = classes(ctx)?;
    let polarity = ctx.cfg.fusion.polarity()?;
    let keep: Option<BTreeSet<&str>> = ctx
        .cfg
        .fusion
        .landmarks
        .as_ref()
        .map(|v| v.iter().map(String::as_str).collect());
    let recs: Vec<_> = ctx
        .reconstructions()?
        .into_iter()
        .filter(|r| keep.as_ref().map_or(true, |k| k.contains(r.landmark_id.as_str())))
        .collect();
    if recs.is_empty() {
        return Err(babel_core::Error::Insufficient("no reconstruction to fuse".into()).into());
    }
    let phis = &ctx.cfg.fusion.phi;
    let palette = default_palette(&classes);

    let mut clouds = Vec::new();
    for rec in &recs {
        let ids = rec.images.values().map(|i| ImageId::new(&i.name));
        let images = ctx.load_images::<T>(ids)?;
        let cloud = fuse_reconstruction(&model, rec, &images, &classes, phis[0])?;
        let stem = format!("fuse/{}/{}", rec.landmark_id, rec.reconstruction_id);
        out.write_jsonl(&format!("{stem}.jsonl"), &cloud.records())?;
        let ply = ctx.paths.output.join(format!("{stem}.ply"));
        export_ply(&ply, &cloud, &palette, ctx.cfg.fusion.include_ambiguous)?;
        out.record(&ply)?;
        clouds.push(cloud);
    }

    let mut summary = FusionSummary {
        concepts: classes.clone(),
        phi: phis.clone(),
        theta: BTreeMap::new(),
        delta: BTreeMap::new(),
        clouds: clouds
            .iter()
            .map(|c| CloudSummary {
                reconstruction_id: c.reconstruction_id.to_string(),
                landmark_id: c.landmark_id.to_string(),
                points: c.num_points(),
                ambiguous: BTreeMap::new(),
                delta: BTreeMap::new(),
            })
            .collect(),
    };
    for &phi in phis {
        let key = phi_key(phi);
        summary.theta.insert(key.clone(), theta(&clouds, phi)?);
        summary.delta.insert(key.clone(), delta(&clouds, &polarity, phi).ok());
        for (c, s) in clouds.iter().zip(&mut summary.clouds) {
            let amb = c.points.iter().filter(|p| p.assigned(phi).is_none()).count();
            s.ambiguous.insert(key.clone(), amb);
            s.delta.insert(key.clone(), reconstruction_delta(c, &polarity, phi));
        }
    }
    out.write_json(FUSION_SUMMARY_FILE, &summary)?;
    for &phi in phis {
        let key = phi_key(phi);
        let d = summary.delta[&key].map_or("undefined".into(), pct);
        println!("phi {key}: theta {} %, delta {d}", pct(summary.theta[&key]));
    }
    out.finish()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub images: usize,
    pub classification: Option<ClassificationReport>,
    pub segmentation: Option<SegMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub queries: usize,
    pub recall: BTreeMap<usize, f64>,
    pub semantic: BTreeMap<usize, babel_core::evaluation::SemanticScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub classes: Vec<String>,
    pub splits: BTreeMap<Split, SplitMetrics>,
    pub fusion: Option<FusionSummary>,
    pub retrieval: Option<RetrievalMetrics>,
}

fn split_metrics<T: Scalar>(
    ctx: &Ctx,
    model: &ToyModel<T>,
    classes: &[String],
    members: &[&LabeledImage],
    truth: Option<&BTreeMap<ImageId, babel_core::synth::ImageTruth>>,
) -> CliResult<SplitMetrics> {
    let class_of = |c: &String| classes.iter().position(|x| x == c);
    let images = ctx.load_images::<T>(members.iter().map(|l| l.image_id.clone()))?;
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut masks = Vec::new();
    for l in members {
        let (_, maps) = model.forward(&images[&l.image_id])?;
        ids.push(l.image_id.clone());
        scores.push(maps.image.iter().map(|v| v.to_f64_lossy()).collect());
        labels.push(l.concepts.iter().filter_map(class_of).collect::<BTreeSet<usize>>());
        if let Some(t) = truth.and_then(|t| t.get(&l.image_id)) {
            if t.concept.is_some() {
                let gt = t.to_mask(images[&l.image_id].width)?.downsample(STRIDE);
                let pred = segment_2d(&maps, image_label(&maps), ctx.cfg.fusion.background_power);
                masks.push((pred, gt));
            }
        }
    }
    let classification = match classification_report(classes, &ids, &scores, &labels) {
        Ok(r) => Some(r),
        Err(babel_core::Error::Metric(m)) => {
            log::warn!("classification metrics skipped: {m}");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let segmentation = if masks.is_empty() {
        None
    } else {
        Some(mean_seg_metrics(&masks)?)
    };
    Ok(SplitMetrics {
        images: members.len(),
        classification,
        segmentation,
    })
}

fn retrieval(ctx: &Ctx, labels: &[LabeledImage]) -> CliResult<Option<RetrievalMetrics>> {
    let Some(path) = &ctx.paths.retrievals else {
        return Ok(None);
    };
    ctx.require(path, "retrieval rankings")?;
    let rankings: Vec<RankedRetrieval> = read_jsonl(path)?;
    let Some(first) = rankings.first() else {
        return Err(CliError::MissingInput(format!("{} has no queries", path.display())));
    };
    let pool: BTreeSet<ImageId> = first.ranking.iter().cloned().collect();
    if pool.len() != ctx.cfg.eval.pool_size {
        log::warn!("retrieval pool has {} images, config expects {}", pool.len(), ctx.cfg.eval.pool_size);
    }
    for r in &rankings {
        r.validate(&pool)?;
    }
    let concept_of: BTreeMap<ImageId, BTreeSet<String>> = labels
        .iter()
        .map(|l| (l.image_id.clone(), l.concepts.clone()))
        .collect();
    let mut out = RetrievalMetrics {
        queries: rankings.len(),
        recall: BTreeMap::new(),
        semantic: BTreeMap::new(),
    };
    for &k in &ctx.cfg.eval.recall_k {
        out.recall.insert(k, recall_at_k(&rankings, k)?);
        match semantic_s(&rankings, &concept_of, k) {
            Ok(s) => {
                out.semantic.insert(k, s);
            }
            Err(babel_core::Error::Metric(m)) => log::warn!("semantic score skipped: {m}"),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(out))
}

fn render_report(r: &Report) -> String {
    let opt = |x: Option<f64>| x.map_or("-".to_string(), pct);
    let mut s = String::new();
    let mut headers = vec!["split", "images", "mAP", "mAP*"];
    headers.extend(r.classes.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = r
        .splits
        .iter()
        .map(|(split, m)| {
            let name = serde_json::to_value(split).ok().and_then(|v| v.as_str().map(str::to_owned));
            let mut row = vec![name.unwrap_or_default(), m.images.to_string()];
            let c = m.classification.as_ref();
            row.push(opt(c.map(|c| c.map)));
            row.push(opt(c.map(|c| c.map_pooled)));
            for cls in &r.classes {
                row.push(opt(c.and_then(|c| c.ap.get(cls).copied().flatten())));
            }
            row
        })
        .collect();
    s.push_str("Classification (AP, %)\n");
    s.push_str(&print_table(&headers, &rows));

    let rows: Vec<Vec<String>> = r
        .splits
        .iter()
        .filter_map(|(split, m)| {
            let seg = m.segmentation?;
            let name = serde_json::to_value(split).ok()?.as_str()?.to_owned();
            Some(vec![name, pct(seg.iou), pct(seg.precision), pct(seg.recall)])
        })
        .collect();
    if !rows.is_empty() {
        s.push_str("\nSegmentation (%)\n");
        s.push_str(&print_table(&["split", "IoU", "precision", "recall"], &rows));
    }

    if let Some(f) = &r.fusion {
        let rows: Vec<Vec<String>> = f
            .phi
            .iter()
            .map(|&p| {
                let k = phi_key(p);
                vec![k.clone(), pct(f.theta[&k]), opt(f.delta[&k])]
            })
            .collect();
        s.push_str("\n3D fusion (%)\n");
        s.push_str(&print_table(&["phi", "theta", "delta"], &rows));
    }

    if let Some(rt) = &r.retrieval {
        let rows: Vec<Vec<String>> = rt
            .recall
            .iter()
            .map(|(k, v)| {
                let sem = rt.semantic.get(k);
                vec![
                    k.to_string(),
                    pct(*v),
                    opt(sem.map(|s| s.s)),
                    opt(sem.map(|s| s.s_pooled)),
                ]
            })
            .collect();
        s.push_str(&format!("\nRetrieval over {} queries (%)\n", rt.queries));
        s.push_str(&print_table(&["K", "Recall@K", "S", "S*"], &rows));
    }
    s
}

pub fn metrics<T: Scalar>(ctx: &Ctx) -> CliResult<()> {
    let mut out = ctx.run_dir("metrics")?;
    let model = model::<T>(ctx)?;
    let classes = classes(ctx)?;
    let labels = ctx.labels()?;
    let truth = if ctx.paths.image_truth.exists() {
        Some(image_truth(&ctx.paths.image_truth)?)
    } else {
        None
    };
    let mut splits = BTreeMap::new();
    for split in [Split::WsK, Split::WsU] {
        let members: Vec<&LabeledImage> = labels.iter().filter(|l| l.split == split).collect();
        if members.is_empty() {
            continue;
        }
        splits.insert(split, split_metrics(ctx, &model, &classes, &members, truth.as_ref())?);
    }
    let fusion_path = ctx.paths.output.join(FUSION_SUMMARY_FILE);
    let fusion = if fusion_path.exists() {
        Some(serde_json::from_slice(&std::fs::read(&fusion_path)?)?)
    } else {
        None
    };
    let report = Report {
        classes,
        splits,
        fusion,
        retrieval: retrieval(ctx, &labels)?,
    };
    let text = render_report(&report);
    out.write_json("metrics/report.json", &report)?;
    out.write_text("metrics/report.txt", &text)?;
    print!("{text}");
    out.finish()?;
    Ok(())
}
