//! Classification, segmentation and retrieval metrics, plus plain-text report
//! tables. Metrics are fractions in [0, 1]; tables print percentages with one
//! decimal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::ImageId;
use crate::raster::Mask;
use crate::rng::rng_from_seed;

/// Indices sorted by descending score, ties by ascending key.
pub fn rank_order<K: Ord>(scores: &[f64], keys: &[K]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| keys[a].cmp(&keys[b]))
    });
    idx
}

/// Interpolation-free AP: mean over positives of precision at their rank.
pub fn average_precision<K: Ord>(scores: &[f64], positives: &[bool], keys: &[K]) -> Result<f64> {
    if scores.len() != positives.len() || scores.len() != keys.len() {
        return Err(Error::Dimension(format!(
            "{} scores, {} labels, {} keys",
            scores.len(),
            positives.len(),
            keys.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let (mut hits, mut sum) = (0usize, 0.0f64);
    for (rank, i) in rank_order(scores, keys).into_iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Metric("average precision needs at least one positive".into()));
    }
    Ok(sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    /// Per-class AP; `None` for classes without positives.
    pub ap: BTreeMap<String, Option<f64>>,
    pub map: f64,
    /// AP over the pooled (image, class) score list.
    pub map_pooled: f64,
}

/// `scores[i][c]` for image `ids[i]`; `labels[i]` its ground-truth classes.
pub fn classification_report(
    classes: &[String],
    ids: &[ImageId],
    scores: &[Vec<f64>],
    labels: &[BTreeSet<usize>],
) -> Result<ClassificationReport> {
    if ids.len() != scores.len() || ids.len() != labels.len() {
        return Err(Error::Dimension("ids, scores and labels differ in length".into()));
    }
    if let Some(s) = scores.iter().find(|s| s.len() != classes.len()) {
        return Err(Error::Dimension(format!(
            "score row has {} entries for {} classes",
            s.len(),
            classes.len()
        )));
    }
    if labels.iter().flatten().any(|&c| c >= classes.len()) {
        return Err(Error::invalid("label out of range"));
    }
    let mut ap = BTreeMap::new();
    let mut valid = Vec::new();
    for (c, name) in classes.iter().enumerate() {
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|l| l.contains(&c)).collect();
        let v = if pos.iter().any(|&p| p) {
            Some(average_precision(&col, &pos, ids)?)
        } else {
            None
        };
        valid.extend(v);
        ap.insert(name.clone(), v);
    }
    if valid.is_empty() {
        return Err(Error::Metric("no class has a positive example".into()));
    }
    let mut pooled_scores = Vec::new();
    let mut pooled_pos = Vec::new();
    let mut pooled_keys = Vec::new();
    for (i, row) in scores.iter().enumerate() {
        for (c, &s) in row.iter().enumerate() {
            pooled_scores.push(s);
            pooled_pos.push(labels[i].contains(&c));
            pooled_keys.push((&ids[i], c));
        }
    }
    Ok(ClassificationReport {
        ap,
        map: valid.iter().sum::<f64>() / valid.len() as f64,
        map_pooled: average_precision(&pooled_scores, &pooled_pos, &pooled_keys)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

/// IoU, precision and recall of a predicted mask. An empty denominator
/// scores 1 when the other mask is empty as well and 0 otherwise.
pub fn seg_metrics(pred: &Mask, gt: &Mask) -> Result<SegMetrics> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Dimension(format!(
            "predicted mask {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let (mut tp, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        tp += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    let ratio = |num: usize, den: usize, other: usize| {
        if den > 0 {
            num as f64 / den as f64
        } else if other == 0 {
            1.0
        } else {
            0.0
        }
    };
    let union = p + g - tp;
    Ok(SegMetrics {
        iou: if union == 0 { 1.0 } else { tp as f64 / union as f64 },
        precision: ratio(tp, p, g),
        recall: ratio(tp, g, p),
    })
}

/// Unweighted mean over images.
pub fn mean_seg_metrics(pairs: &[(Mask, Mask)]) -> Result<SegMetrics> {
    if pairs.is_empty() {
        return Err(Error::Metric("no masks to evaluate".into()));
    }
    let mut acc = SegMetrics {
        iou: 0.0,
        precision: 0.0,
        recall: 0.0,
    };
    for (p, g) in pairs {
        let m = seg_metrics(p, g)?;
        acc.iou += m.iou;
        acc.precision += m.precision;
        acc.recall += m.recall;
    }
    let n = pairs.len() as f64;
    Ok(SegMetrics {
        iou: acc.iou / n,
        precision: acc.precision / n,
        recall: acc.recall / n,
    })
}

/// Row-normalized confusion matrix; rows are ground truth. Rows of classes
/// without examples stay zero.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<f64>>> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0.0; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::invalid(format!(
                "class index out of range (pred {p}, label {l}, {classes} classes)"
            )));
        }
        m[l][p] += 1.0;
    }
    for row in &mut m {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedRetrieval {
    pub query_id: String,
    /// Best first.
    pub ranking: Vec<ImageId>,
    pub target: ImageId,
    pub target_label: Option<String>,
}

impl RankedRetrieval {
    /// The ranking must be a permutation of `pool` and contain the target.
    pub fn validate(&self, pool: &BTreeSet<ImageId>) -> Result<()> {
        let got: BTreeSet<&ImageId> = self.ranking.iter().collect();
        if got.len() != self.ranking.len()
            || got.len() != pool.len()
            || !pool.iter().all(|id| got.contains(id))
        {
            return Err(Error::Metric(format!(
                "ranking of query {} is not a permutation of the pool",
                self.query_id
            )));
        }
        if !pool.contains(&self.target) {
            return Err(Error::Metric(format!(
                "target {} of query {} is not in the pool",
                self.target, self.query_id
            )));
        }
        Ok(())
    }

    pub fn target_rank(&self) -> Option<usize> {
        self.ranking.iter().position(|id| *id == self.target)
    }
}

/// Fraction of queries whose target is among the top `k`.
pub fn recall_at_k(retrievals: &[RankedRetrieval], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if retrievals.is_empty() {
        return Err(Error::Metric("no queries".into()));
    }
    let hits = retrievals
        .iter()
        .filter(|r| r.ranking.iter().take(k).any(|id| *id == r.target))
        .count();
    Ok(hits as f64 / retrievals.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticScore {
    pub per_class: BTreeMap<String, f64>,
    /// Mean over classes.
    pub s: f64,
    /// Mean over queries.
    pub s_pooled: f64,
}

/// A query succeeds when one of its top `k` images carries the target's
/// label. Queries without a target label are skipped; unlabeled retrieved
/// images never match.
pub fn semantic_s(
    retrievals: &[RankedRetrieval],
    labels: &BTreeMap<ImageId, BTreeSet<String>>,
    k: usize,
) -> Result<SemanticScore> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in retrievals {
        let Some(want) = r.target_label.as_deref() else {
            continue;
        };
        let ok = r
            .ranking
            .iter()
            .take(k)
            .any(|id| labels.get(id).is_some_and(|l| l.contains(want)));
        let e = per.entry(want).or_default();
        e.0 += ok as usize;
        e.1 += 1;
    }
    if per.is_empty() {
        return Err(Error::Metric("no labeled queries".into()));
    }
    let per_class: BTreeMap<String, f64> = per
        .iter()
        .map(|(c, &(h, n))| (c.to_string(), h as f64 / n as f64))
        .collect();
    let (hits, total) = per.values().fold((0, 0), |a, &(h, n)| (a.0 + h, a.1 + n));
    Ok(SemanticScore {
        s: per_class.values().sum::<f64>() / per_class.len() as f64,
        per_class,
        s_pooled: hits as f64 / total as f64,
    })
}

pub const DEFAULT_POOL_SIZE: usize = 1000;

/// Retrieval pool: every labeled image plus a seeded random unlabeled fill.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPool {
    pub images: Vec<ImageId>,
    pub labeled: usize,
}

impl EvalPool {
    pub fn build(
        labeled: &[ImageId],
        unlabeled: &[ImageId],
        size: usize,
        seed: u64,
    ) -> Result<Self> {
        let lab: BTreeSet<&ImageId> = labeled.iter().collect();
        if lab.len() > size {
            return Err(Error::Insufficient(format!(
                "{} labeled images do not fit a pool of {size}",
                lab.len()
            )));
        }
        let mut fill: Vec<&ImageId> = unlabeled
            .iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|id| !lab.contains(id))
            .collect();
        let need = size - lab.len();
        if fill.len() < need {
            return Err(Error::Insufficient(format!(
                "pool needs {need} unlabeled images, only {} available",
                fill.len()
            )));
        }
        fill.shuffle(&mut rng_from_seed(seed));
        let mut images: Vec<ImageId> = lab.iter().map(|id| (*id).clone()).collect();
        images.extend(fill.into_iter().take(need).cloned());
        images.sort();
        Ok(Self {
            images,
            labeled: lab.len(),
        })
    }
}

pub fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Right-aligned plain-text table; the first column is left-aligned.
pub fn format_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, w) in widths.iter().enumerate().take(cols) {
            let cell = cells.get(i).map(String::as_str).unwrap_or("");
            if i == 0 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "  {cell:>w$}");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(headers);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<ImageId> {
        (0..n).map(|i| ImageId::new(format!("i{i:03}"))).collect()
    }

    #[test]
    fn ap_examples() {
        let k = ids(3);
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false], &k).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true], &k[..2]).unwrap(), 0.5);
        assert!(average_precision(&[0.9, 0.1], &[false, false], &k[..2]).is_err());
        // tie broken by ascending id: i000 first
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true], &k[..2]).unwrap(), 0.5);
    }

    #[test]
    fn pooled_map_is_ap_of_the_pooled_list() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let id = ids(3);
        let scores = vec![vec![0.9, 0.2], vec![0.3, 0.8], vec![0.6, 0.7]];
        let labels = vec![BTreeSet::from([0]), BTreeSet::from([1]), BTreeSet::from([0])];
        let r = classification_report(&classes, &id, &scores, &labels).unwrap();
        let flat: Vec<f64> = scores.iter().flatten().copied().collect();
        let pos = [true, false, false, true, true, false];
        let keys: Vec<(usize, usize)> = (0..3).flat_map(|i| [(i, 0), (i, 1)]).collect();
        assert_eq!(r.map_pooled, average_precision(&flat, &pos, &keys).unwrap());
        assert_eq!(r.ap["b"], Some(1.0));
    }

    #[test]
    fn seg_examples() {
        let a = Mask::from_fn(4, 4, |_, y| y < 2);
        assert_eq!(
            seg_metrics(&a, &a).unwrap(),
            SegMetrics {
                iou: 1.0,
                precision: 1.0,
                recall: 1.0
            }
        );
        let b = Mask::from_fn(4, 4, |_, y| y >= 2);
        let m = seg_metrics(&a, &b).unwrap();
        assert_eq!((m.iou, m.precision, m.recall), (0.0, 0.0, 0.0));
        let left = Mask::from_fn(4, 4, |x, _| x < 2);
        let m = seg_metrics(&a, &left).unwrap();
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.precision, m.recall), (0.5, 0.5));
        let e = Mask::empty(4, 4);
        assert_eq!(seg_metrics(&e, &e).unwrap().iou, 1.0);
        assert!(seg_metrics(&e, &Mask::empty(2, 2)).is_err());
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, (i == j) as u8 as f64);
            }
        }
        let m = confusion_matrix(&[1, 1, 1, 1], &[0, 1, 2, 2], 3).unwrap();
        for row in &m {
            assert_eq!(row, &vec![0.0, 1.0, 0.0]);
        }
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
    }

    fn retrieval(target_rank: usize, n: usize, label: Option<&str>) -> RankedRetrieval {
        let pool = ids(n);
        let mut ranking = pool.clone();
        ranking.swap(0, target_rank);
        RankedRetrieval {
            query_id: "q".into(),
            ranking,
            target: pool[0].clone(),
            target_label: label.map(str::to_owned),
        }
    }

    #[test]
    fn recall_examples() {
        let first = vec![retrieval(0, 5, None); 3];
        assert_eq!(recall_at_k(&first, 1).unwrap(), 1.0);
        let late = vec![retrieval(3, 5, None); 3];
        assert_eq!(recall_at_k(&late, 3).unwrap(), 0.0);
        assert_eq!(recall_at_k(&late, 4).unwrap(), 1.0);
        assert!(recall_at_k(&late, 0).is_err());
        let pool: BTreeSet<ImageId> = ids(5).into_iter().collect();
        late[0].validate(&pool).unwrap();
        assert!(late[0].validate(&ids(4).into_iter().collect()).is_err());
    }

    #[test]
    fn semantic_examples() {
        let r = vec![retrieval(2, 4, Some("nave"))];
        let mut labels = BTreeMap::new();
        labels.insert(r[0].ranking[0].clone(), BTreeSet::from(["nave".to_string()]));
        let s = semantic_s(&r, &labels, 1).unwrap();
        assert_eq!((s.s, s.s_pooled), (1.0, 1.0));
        let s = semantic_s(&r, &BTreeMap::new(), 4).unwrap();
        assert_eq!(s.s, 0.0);
        assert!(semantic_s(&[retrieval(0, 3, None)], &labels, 1).is_err());
    }

    #[test]
    fn semantic_class_mean_vs_pooled() {
        let mut r = vec![retrieval(0, 3, Some("a")); 3];
        r.push(retrieval(0, 3, Some("b")));
        let mut labels = BTreeMap::new();
        labels.insert(ImageId::new("i000"), BTreeSet::from(["a".to_string()]));
        let s = semantic_s(&r, &labels, 1).unwrap();
        assert_eq!(s.s, 0.5);
        assert_eq!(s.s_pooled, 0.75);
    }

    #[test]
    fn pool_construction() {
        let lab = ids(3);
        let unl: Vec<ImageId> = (0..20).map(|i| ImageId::new(format!("u{i:02}"))).collect();
        let p = EvalPool::build(&lab, &unl, 10, 4).unwrap();
        assert_eq!(p.images.len(), 10);
        assert!(lab.iter().all(|l| p.images.contains(l)));
        assert_eq!(p, EvalPool::build(&lab, &unl, 10, 4).unwrap());
        assert!(EvalPool::build(&lab, &unl, 30, 4).is_err());
        assert!(EvalPool::build(&lab, &unl, 2, 4).is_err());
    }

    #[test]
    fn table_layout() {
        let t = format_table(
            &["Concept".into(), "AP".into()],
            &[vec!["nave".into(), pct(0.753)], vec!["mAP".into(), pct(0.52)]],
        );
        assert_eq!(t, "Concept    AP\n-------------\nnave     75.3\nmAP      52.0\n");
    }
}
