//! Image/concept association, spatial-connector suppression, landmark- and
//! image-level splits, and class balancing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{parse_word_list, tokenize, Corpus, ImageDoc, NounTagger};
use crate::error::{Error, Result};
use crate::ids::{ImageId, LandmarkId};
use crate::rng::rng_from_seed;

pub const DEFAULT_CONNECTORS: [&str; 12] = [
    "above", "over", "below", "under", "beside", "behind", "from", "towards", "left", "right",
    "east", "west",
];

/// Reference evaluation vocabulary.
pub const REFERENCE_CONCEPTS: [&str; 10] = [
    "facade", "window", "chapel", "organ", "nave", "tower", "choir", "portal", "altar", "statue",
];

/// Ordered set of spatial connector words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectorList(Vec<String>);

impl Default for ConnectorList {
    fn default() -> Self {
        Self(DEFAULT_CONNECTORS.iter().map(|s| s.to_string()).collect())
    }
}

impl ConnectorList {
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut out: Vec<String> = Vec::new();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !out.contains(&w) {
                out.push(w);
            }
        }
        Self(out)
    }

    /// One connector per line, `#` comments allowed.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(parse_word_list(&text)))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.iter().any(|c| c == token)
    }

    pub fn words(&self) -> &[String] {
        &self.0
    }
}

/// Mentions of `concept` in `text` that come before the first connector.
pub fn unsuppressed_mentions(
    text: &str,
    concept: &str,
    tagger: &dyn NounTagger,
    connectors: &ConnectorList,
) -> usize {
    let tokens = tokenize(text);
    let cutoff = tokens
        .iter()
        .position(|t| connectors.contains(t))
        .unwrap_or(tokens.len());
    tagger
        .tag(&tokens)
        .into_iter()
        .filter(|(n, i)| n == concept && *i < cutoff)
        .count()
}

/// Concepts of `doc`: a concept is kept if the caption or the leaf category
/// mentions it before any spatial connector. Each source is judged on its own.
pub fn associate(
    doc: &ImageDoc,
    concepts: &BTreeSet<String>,
    tagger: &dyn NounTagger,
    connectors: &ConnectorList,
) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for source in [doc.caption.as_str(), doc.leaf_category()] {
        let tokens = tokenize(source);
        let cutoff = tokens
            .iter()
            .position(|t| connectors.contains(t))
            .unwrap_or(tokens.len());
        for (noun, i) in tagger.tag(&tokens) {
            if i < cutoff && concepts.contains(&noun) {
                out.insert(noun);
            }
        }
    }
    out
}

/// Label every document; images with no concept are omitted.
pub fn label_corpus(
    corpus: &Corpus,
    concepts: &BTreeSet<String>,
    tagger: &dyn NounTagger,
    connectors: &ConnectorList,
) -> Vec<(ImageId, BTreeSet<String>)> {
    corpus
        .docs()
        .iter()
        .filter_map(|d| {
            let c = associate(d, concepts, tagger, connectors);
            (!c.is_empty()).then(|| (d.image_id.clone(), c))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    /// Held-out images of landmarks seen in training.
    #[serde(rename = "WS-K")]
    WsK,
    /// Images of landmarks never seen in training.
    #[serde(rename = "WS-U")]
    WsU,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image_id: ImageId,
    pub concepts: BTreeSet<String>,
    pub split: Split,
}

impl LabeledImage {
    /// The concept, when exactly one is associated.
    pub fn single_label(&self) -> Option<&str> {
        if self.concepts.len() == 1 {
            self.concepts.iter().next().map(String::as_str)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub landmarks_train: usize,
    pub landmarks_unseen: usize,
    pub train: usize,
    pub ws_k: usize,
    pub ws_u: usize,
    /// Set when fewer than ten landmarks forced a floor allocation.
    pub warning: Option<String>,
}

/// 9:1 landmark split (held-out landmarks form WS-U), then a 9:1 image split
/// over the remaining landmarks (held-out images form WS-K). Deterministic in
/// `seed`.
pub fn make_splits(
    corpus: &Corpus,
    labeled: &[(ImageId, BTreeSet<String>)],
    seed: u64,
) -> Result<(Vec<LabeledImage>, SplitSummary)> {
    let mut rng = rng_from_seed(seed);
    let landmark_of = |id: &ImageId| -> Result<LandmarkId> {
        corpus
            .get(id)
            .map(|d| d.landmark_id.clone())
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    };
    let mut landmarks: Vec<LandmarkId> = labeled
        .iter()
        .map(|(id, _)| landmark_of(id))
        .collect::<Result<BTreeSet<_>>>()?
        .into_iter()
        .collect();
    if landmarks.len() < 2 {
        return Err(Error::Insufficient(format!(
            "splits need labeled images from at least 2 landmarks, got {}",
            landmarks.len()
        )));
    }
    let warning = (landmarks.len() < 10).then(|| {
        let w = format!(
            "only {} landmarks; holding out 1 landmark for WS-U",
            landmarks.len()
        );
        log::warn!("{w}");
        w
    });
    landmarks.shuffle(&mut rng);
    let n_unseen = (landmarks.len() / 10).max(1);
    let unseen: BTreeSet<LandmarkId> = landmarks[..n_unseen].iter().cloned().collect();

    let mut retained: Vec<usize> = Vec::new();
    let mut split = vec![Split::Train; labeled.len()];
    for (i, (id, _)) in labeled.iter().enumerate() {
        if unseen.contains(&landmark_of(id)?) {
            split[i] = Split::WsU;
        } else {
            retained.push(i);
        }
    }
    retained.sort_by(|&a, &b| labeled[a].0.cmp(&labeled[b].0));
    retained.shuffle(&mut rng);
    let n_known = retained.len() / 10;
    for &i in &retained[..n_known] {
        split[i] = Split::WsK;
    }

    let out: Vec<LabeledImage> = labeled
        .iter()
        .zip(split)
        .map(|((id, c), s)| LabeledImage {
            image_id: id.clone(),
            concepts: c.clone(),
            split: s,
        })
        .collect();
    let count = |s: Split| out.iter().filter(|l| l.split == s).count();
    let summary = SplitSummary {
        landmarks_train: landmarks.len() - n_unseen,
        landmarks_unseen: n_unseen,
        train: count(Split::Train),
        ws_k: count(Split::WsK),
        ws_u: count(Split::WsU),
        warning,
    };
    Ok((out, summary))
}

/// Resample each class to exactly `target` items: without replacement when
/// the class is large enough, otherwise every item once plus draws with
/// replacement. The result is shuffled; deterministic in `seed`.
pub fn balance_classes(
    items: &[(ImageId, String)],
    classes: &[String],
    target: usize,
    seed: u64,
) -> Result<Vec<(ImageId, String)>> {
    let mut rng = rng_from_seed(seed);
    let mut by_class: BTreeMap<&str, Vec<&(ImageId, String)>> =
        classes.iter().map(|c| (c.as_str(), Vec::new())).collect();
    for it in items {
        if let Some(v) = by_class.get_mut(it.1.as_str()) {
            v.push(it);
        }
    }
    let mut out = Vec::with_capacity(target * classes.len());
    for (class, members) in &by_class {
        if members.is_empty() {
            return Err(Error::EmptyClass(class.to_string()));
        }
        if members.len() >= target {
            out.extend(
                members
                    .choose_multiple(&mut rng, target)
                    .map(|&it| it.clone()),
            );
        } else {
            out.extend(members.iter().map(|&it| it.clone()));
            for _ in members.len()..target {
                out.push(members[rng.gen_range(0..members.len())].clone());
            }
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}
