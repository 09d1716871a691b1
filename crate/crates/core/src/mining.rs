//! Concept distillation: frequency support across landmarks plus coherence
//! measured as the density of per-landmark visual adjacency graphs.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::{BigRational, Ratio};
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{extract_nouns, Corpus, NounTagger};
use crate::error::{Error, Result};
use crate::ids::{ImageId, LandmarkId};
use crate::sfm::TrackIndex;

/// Edge threshold: images are adjacent when they share at least this many
/// keypoints.
pub const DEFAULT_MIN_SHARED: usize = 10;
pub const DEFAULT_MIN_LANDMARKS: usize = 25;
pub const DEFAULT_MIN_RHO: f64 = 0.08;
/// Graphs below this many nodes do not enter the mean density.
pub const DEFAULT_MIN_NODES: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateConcept {
    pub noun: String,
    pub per_landmark_images: BTreeMap<LandmarkId, BTreeSet<ImageId>>,
}

impl CandidateConcept {
    pub fn supporting_landmarks(&self) -> impl Iterator<Item = &LandmarkId> {
        self.per_landmark_images
            .iter()
            .filter(|(_, imgs)| !imgs.is_empty())
            .map(|(lm, _)| lm)
    }

    pub fn support(&self) -> usize {
        self.supporting_landmarks().count()
    }
}

/// Every distinct noun in a leaf category, with its images grouped by
/// landmark. Sorted by noun.
pub fn candidate_concepts(corpus: &Corpus, tagger: &dyn NounTagger) -> Vec<CandidateConcept> {
    let mut acc: BTreeMap<String, BTreeMap<LandmarkId, BTreeSet<ImageId>>> = BTreeMap::new();
    for doc in corpus.docs() {
        for (noun, _) in extract_nouns(doc.leaf_category(), tagger) {
            acc.entry(noun)
                .or_default()
                .entry(doc.landmark_id.clone())
                .or_default()
                .insert(doc.image_id.clone());
        }
    }
    acc.into_iter()
        .map(|(noun, per_landmark_images)| CandidateConcept {
            noun,
            per_landmark_images,
        })
        .collect()
}

/// Undirected simple graph over images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyGraph {
    pub nodes: Vec<ImageId>,
    /// Index pairs (i, j) with i < j.
    pub edges: Vec<(usize, usize)>,
}

impl AdjacencyGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Visual adjacency graph of `candidate` within `landmark`. Nodes are the
/// candidate's images that are registered in `index`; an edge joins two
/// images sharing at least `k` keypoints.
pub fn build_adjacency_graph(
    candidate: &CandidateConcept,
    landmark: &LandmarkId,
    index: &TrackIndex,
    k: usize,
) -> Result<AdjacencyGraph> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let images = candidate
        .per_landmark_images
        .get(landmark)
        .ok_or_else(|| Error::UnknownLandmark(landmark.to_string()))?;
    let nodes: Vec<ImageId> = images.iter().filter(|i| index.contains(i)).cloned().collect();
    let mut edges = Vec::new();
    for i in 0..nodes.len() {
        for j in (i + 1)..nodes.len() {
            if index.shared_keypoints(&nodes[i], &nodes[j])? >= k {
                edges.push((i, j));
            }
        }
    }
    Ok(AdjacencyGraph { nodes, edges })
}

/// 2|E| / (|V|(|V|-1)) as an exact ratio.
pub fn graph_density_exact(graph: &AdjacencyGraph) -> Result<Ratio<u64>> {
    let v = graph.num_nodes() as u64;
    if v < 2 {
        return Err(Error::UndefinedDensity(graph.num_nodes()));
    }
    Ok(Ratio::new(2 * graph.num_edges() as u64, v * (v - 1)))
}

pub fn graph_density(graph: &AdjacencyGraph) -> Result<f64> {
    let v = graph.num_nodes();
    if v < 2 {
        return Err(Error::UndefinedDensity(v));
    }
    Ok(2.0 * graph.num_edges() as f64 / (v as f64 * (v as f64 - 1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub num_nodes: usize,
    pub num_edges: usize,
    /// Absent for graphs with fewer than two nodes.
    pub density: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub noun: String,
    pub graphs: BTreeMap<LandmarkId, GraphStats>,
    /// Mean density over qualifying graphs; absent when none qualify.
    pub mean_density: Option<f64>,
    pub num_qualifying_graphs: usize,
}

pub fn coherence(
    candidate: &CandidateConcept,
    index: &TrackIndex,
    k: usize,
    min_nodes: usize,
) -> Result<CoherenceReport> {
    let mut graphs = BTreeMap::new();
    // exact so that inclusive thresholds are not decided by summation order
    let mut sum = BigRational::zero();
    let mut qualifying = 0usize;
    for landmark in candidate.per_landmark_images.keys() {
        let g = build_adjacency_graph(candidate, landmark, index, k)?;
        let density = graph_density(&g).ok();
        if density.is_some() && g.num_nodes() >= min_nodes {
            let r = graph_density_exact(&g)?;
            sum += BigRational::new((*r.numer()).into(), (*r.denom()).into());
            qualifying += 1;
        }
        graphs.insert(
            landmark.clone(),
            GraphStats {
                num_nodes: g.num_nodes(),
                num_edges: g.num_edges(),
                density,
            },
        );
    }
    Ok(CoherenceReport {
        noun: candidate.noun.clone(),
        graphs,
        mean_density: (qualifying > 0)
            .then(|| (sum / BigRational::from_integer(qualifying.into())).to_f64())
            .flatten(),
        num_qualifying_graphs: qualifying,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillThresholds {
    pub min_shared: usize,
    pub min_landmarks: usize,
    pub min_rho: f64,
    pub min_nodes: usize,
}

impl Default for DistillThresholds {
    fn default() -> Self {
        Self {
            min_shared: DEFAULT_MIN_SHARED,
            min_landmarks: DEFAULT_MIN_LANDMARKS,
            min_rho: DEFAULT_MIN_RHO,
            min_nodes: DEFAULT_MIN_NODES,
        }
    }
}

impl DistillThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.min_shared == 0 || self.min_landmarks == 0 || self.min_nodes < 2 {
            return Err(Error::invalid(
                "thresholds must be positive (K >= 1, min_landmarks >= 1, min_nodes >= 2)",
            ));
        }
        if !(self.min_rho > 0.0) {
            return Err(Error::invalid("min_rho must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub noun: String,
    pub support: usize,
    pub coherence: CoherenceReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub concepts: Vec<Concept>,
    pub thresholds: DistillThresholds,
}

impl ConceptSet {
    pub fn nouns(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.noun.clone()).collect()
    }

    pub fn contains(&self, noun: &str) -> bool {
        self.concepts.iter().any(|c| c.noun == noun)
    }
}

/// Keep candidates supported by at least `min_landmarks` landmarks whose mean
/// graph density reaches `min_rho`. Both tests are inclusive. Output is
/// ordered by descending support, then noun.
pub fn distill(
    candidates: &[CandidateConcept],
    index: &TrackIndex,
    thresholds: DistillThresholds,
) -> Result<ConceptSet> {
    thresholds.validate()?;
    let reports: Vec<Option<Concept>> = candidates
        .par_iter()
        .map(|c| {
            let support = c.support();
            if support < thresholds.min_landmarks {
                return Ok(None);
            }
            let report = coherence(c, index, thresholds.min_shared, thresholds.min_nodes)?;
            Ok(match report.mean_density {
                Some(rho) if rho >= thresholds.min_rho => Some(Concept {
                    noun: c.noun.clone(),
                    support,
                    coherence: report,
                }),
                _ => None,
            })
        })
        .collect::<Result<_>>()?;
    let mut concepts: Vec<Concept> = reports.into_iter().flatten().collect();
    concepts.sort_by(|a, b| b.support.cmp(&a.support).then_with(|| a.noun.cmp(&b.noun)));
    Ok(ConceptSet {
        concepts,
        thresholds,
    })
}
