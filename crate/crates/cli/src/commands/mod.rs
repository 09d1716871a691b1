mod model;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use babel_core::corpus::{load_corpus, read_jsonl, Corpus, NounLexicon};
use babel_core::evaluation::format_table;
use babel_core::ids::ImageId;
use babel_core::labeling::{balance_classes, label_corpus, make_splits, ConnectorList, LabeledImage, Split};
use babel_core::mining::{candidate_concepts, distill, ConceptSet};
use babel_core::pairs::{augment_caption_pairs, compose_batch, enumerate_pairs, to_augmented_records, ImagePair, Provenance};
use babel_core::raster::Raster;
use babel_core::rng::{derive_seed, stage_rng};
use babel_core::selftest;
use babel_core::sfm::{build_track_index, read_reconstruction_tree, Reconstruction, TrackIndex};
use babel_core::synth::{self, generate, SceneSpec};
use serde::{Deserialize, Serialize};

pub use model::{fuse, metrics, train_toy};

use crate::config::{PipelineConfig, Resolved, EFFECTIVE_CONFIG};
use crate::error::{CliError, CliResult};
use crate::run_dir::RunDir;

pub const CONCEPTS_FILE: &str = "mine/concepts.json";
pub const LABELS_FILE: &str = "label/labels.jsonl";
pub const BALANCED_FILE: &str = "label/balanced.jsonl";
pub const PAIRS_FILE: &str = "pairs/pairs.jsonl";
pub const CHECKPOINT_FILE: &str = "train/model.ckpt";
pub const CLASSES_FILE: &str = "train/classes.json";
pub const FUSION_SUMMARY_FILE: &str = "fuse/summary.json";

/// Loaded config plus resolved paths, shared by every command.
pub struct Ctx {
    pub cfg: PipelineConfig,
    pub paths: Resolved,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig) -> Self {
        let paths = cfg.resolve();
        Self { cfg, paths }
    }

    /// Open the run directory for a command and echo the effective config.
    pub fn run_dir(&self, prefix: &str) -> CliResult<RunDir> {
        let mut out = RunDir::open(&self.paths.output, prefix)?;
        out.write_text(EFFECTIVE_CONFIG, &self.cfg.to_toml()?)?;
        Ok(out)
    }

    fn require(&self, path: &Path, hint: &str) -> CliResult<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::MissingInput(format!("{} ({hint})", path.display())))
        }
    }

    fn stage_file(&self, rel: &str, producer: &str) -> CliResult<PathBuf> {
        let p = self.paths.output.join(rel);
        self.require(&p, &format!("run `{producer}` first"))?;
        Ok(p)
    }

    pub fn reconstructions(&self) -> CliResult<Vec<Reconstruction>> {
        self.require(&self.paths.reconstructions, "reconstruction tree")?;
        Ok(read_reconstruction_tree(&self.paths.reconstructions)?)
    }

    pub fn index(&self) -> CliResult<(Vec<Reconstruction>, TrackIndex)> {
        let recs = self.reconstructions()?;
        let index = build_track_index(&recs)?;
        Ok((recs, index))
    }

    pub fn corpus(&self) -> CliResult<Corpus> {
        self.require(&self.paths.corpus, "corpus")?;
        Ok(load_corpus(&self.paths.corpus)?)
    }

    pub fn lexicon(&self) -> CliResult<NounLexicon> {
        self.require(&self.paths.nouns, "noun list")?;
        self.require(&self.paths.blocklist, "entity blocklist")?;
        Ok(NounLexicon::load(&self.paths.nouns, &self.paths.blocklist)?
            .with_plural_folding(self.cfg.labeling.plural_folding))
    }

    pub fn connectors(&self) -> CliResult<ConnectorList> {
        Ok(match (&self.cfg.labeling.connectors, &self.paths.connectors) {
            (Some(words), _) => ConnectorList::new(words),
            (None, Some(path)) => {
                self.require(path, "connector list")?;
                ConnectorList::load(path)?
            }
            (None, None) => ConnectorList::default(),
        })
    }

    pub fn concepts(&self) -> CliResult<ConceptSet> {
        let p = self.stage_file(CONCEPTS_FILE, "mine")?;
        Ok(serde_json::from_slice(&std::fs::read(p)?)?)
    }

    pub fn labels(&self) -> CliResult<Vec<LabeledImage>> {
        Ok(read_jsonl(&self.stage_file(LABELS_FILE, "label")?)?)
    }

    /// Training singles: the balanced list when `label` wrote one,
    /// otherwise every single-label training image.
    pub fn training_singles(&self, labels: &[LabeledImage]) -> CliResult<Vec<(ImageId, String)>> {
        let balanced = self.paths.output.join(BALANCED_FILE);
        if self.cfg.labeling.balance_target.is_some() && balanced.exists() {
            return Ok(read_jsonl(&balanced)?);
        }
        Ok(labels
            .iter()
            .filter(|l| l.split == Split::Train)
            .filter_map(|l| l.single_label().map(|c| (l.image_id.clone(), c.to_owned())))
            .collect())
    }

    pub fn image_path(&self, id: &ImageId) -> PathBuf {
        self.paths.images.join(format!("{id}.png"))
    }

    pub fn load_images<T: babel_core::Scalar>(
        &self,
        ids: impl IntoIterator<Item = ImageId>,
    ) -> CliResult<BTreeMap<ImageId, Raster<T>>> {
        ids.into_iter()
            .map(|id| {
                let p = self.image_path(&id);
                self.require(&p, "image")?;
                Ok((id, Raster::load_png(&p)?))
            })
            .collect()
    }
}

fn print_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let h: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
    format_table(&h, rows)
}

#[derive(Serialize)]
struct ReconstructionSummary<'a> {
    reconstruction_id: &'a str,
    landmark_id: &'a str,
    images: usize,
    points: usize,
    observations: usize,
}

pub fn ingest(ctx: &Ctx) -> CliResult<()> {
    let mut out = ctx.run_dir("ingest")?;
    let (recs, index) = ctx.index()?;
    let stats = index.stats();
    let per: Vec<ReconstructionSummary> = recs
        .iter()
        .map(|r| ReconstructionSummary {
            reconstruction_id: r.reconstruction_id.as_str(),
            landmark_id: r.landmark_id.as_str(),
            images: r.images.len(),
            points: r.points.len(),
            observations: r.num_observations(),
        })
        .collect();
    out.write_json(
        "ingest/index_stats.json",
        &serde_json::json!({ "index": stats, "reconstructions": per }),
    )?;
    println!(
        "{} reconstructions, {} images, {} points, {} indexed pairs",
        stats.reconstructions, stats.images, stats.points, stats.indexed_pairs
    );
    out.finish()?;
    Ok(())
}

pub fn mine(ctx: &Ctx) -> CliResult<()> {
    let mut out = ctx.run_dir("mine")?;
    let corpus = ctx.corpus()?;
    let lexicon = ctx.lexicon()?;
    let (_, index) = ctx.index()?;
    let candidates = candidate_concepts(&corpus, &lexicon);
    let set = distill(&candidates, &index, ctx.cfg.mining)?;

    let cand: Vec<_> = candidates
        .iter()
        .map(|c| serde_json::json!({ "noun": c.noun, "support": c.support() }))
        .collect();
    out.write_json("mine/candidates.json", &cand)?;
    out.write_json(CONCEPTS_FILE, &set)?;
    let rows: Vec<Vec<String>> = set
        .concepts
        .iter()
        .map(|c| {
            vec![
                c.noun.clone(),
                c.support.to_string(),
                c.coherence.num_qualifying_graphs.to_string(),
                c.coherence
                    .mean_density
                    .map_or("-".into(), |d| format!("{d:.3}")),
            ]
        })
        .collect();
    let table = print_table(&["concept", "landmarks", "graphs", "mean density"], &rows);
    out.write_text("mine/concepts.txt", &table)?;
    print!("{table}");
    println!("{} of {} candidates distilled", set.concepts.len(), candidates.len());
    out.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct SplitReport {
    summary: babel_core::labeling::SplitSummary,
    classes: Vec<String>,
    /// Images per class and split (multi-label images count once per class).
    per_class: BTreeMap<String, BTreeMap<Split, usize>>,
    multi_label: usize,
}

pub fn label(ctx: &Ctx) -> CliResult<()> {
    let mut out = ctx.run_dir("label")?;
    let concepts = ctx.concepts()?;
    if concepts.concepts.is_empty() {
        return Err(babel_core::Error::Insufficient("the mined concept set is empty".into()).into());
    }
    let corpus = ctx.corpus()?;
    let lexicon = ctx.lexicon()?;
    let classes = concepts.nouns();
    let set: BTreeSet<String> = classes.iter().cloned().collect();
    let labeled = label_corpus(&corpus, &set, &lexicon, &ctx.connectors()?);
    let (labels, summary) = make_splits(&corpus, &labeled, derive_seed(ctx.cfg.seed, "label/splits"))?;

    let mut per_class: BTreeMap<String, BTreeMap<Split, usize>> = BTreeMap::new();
    for l in &labels {
        for c in &l.concepts {
            *per_class.entry(c.clone()).or_default().entry(l.split).or_default() += 1;
        }
    }
    out.write_jsonl(LABELS_FILE, &labels)?;
    if let Some(target) = ctx.cfg.labeling.balance_target {
        let items: Vec<(ImageId, String)> = labels
            .iter()
            .filter(|l| l.split == Split::Train)
            .filter_map(|l| l.single_label().map(|c| (l.image_id.clone(), c.to_owned())))
            .collect();
        let balanced = balance_classes(&items, &classes, target, derive_seed(ctx.cfg.seed, "label/balance"))?;
        out.write_jsonl(BALANCED_FILE, &balanced)?;
    }
    let multi_label = labels.iter().filter(|l| l.concepts.len() > 1).count();
    println!(
        "{} labeled images: train {}, WS-K {}, WS-U {} ({} multi-label)",
        labels.len(),
        summary.train,
        summary.ws_k,
        summary.ws_u,
        multi_label
    );
    if let Some(w) = &summary.warning {
        log::warn!("{w}");
    }
    out.write_json(
        "label/splits.json",
        &SplitReport {
            summary,
            classes,
            per_class,
            multi_label,
        },
    )?;
    out.finish()?;
    Ok(())
}

pub fn pairs(ctx: &Ctx) -> CliResult<()> {
    let mut out = ctx.run_dir("pairs")?;
    let labels = ctx.labels()?;
    let (_, index) = ctx.index()?;
    let singles = ctx.training_singles(&labels)?;
    let eligible: BTreeSet<ImageId> = singles
        .iter()
        .map(|(id, _)| id.clone())
        .filter(|id| index.contains(id))
        .collect();
    let pairs = enumerate_pairs(&index, &eligible, ctx.cfg.pairs.min_shared)?;
    out.write_jsonl(PAIRS_FILE, &pairs)?;

    let mut single_ids: Vec<ImageId> = singles.into_iter().map(|(id, _)| id).collect();
    single_ids.sort();
    single_ids.dedup();
    let sizes: BTreeMap<ImageId, (u32, u32)> = single_ids
        .iter()
        .chain(pairs.iter().flat_map(|p| [&p.image_a, &p.image_b]))
        .map(|id| {
            let size = match index.image_size(id) {
                Ok(s) => s,
                Err(_) => {
                    let r: Raster<f32> = Raster::load_png(&ctx.image_path(id))?;
                    (r.width as u32, r.height as u32)
                }
            };
            Ok((id.clone(), size))
        })
        .collect::<CliResult<_>>()?;
    let sampling = ctx.cfg.train.sampling();
    let size_of = |id: &ImageId| sizes.get(id).copied().unwrap_or((0, 0));
    let mut rng = stage_rng(ctx.cfg.seed, "pairs/batches");
    let batches = (0..ctx.cfg.pairs.batches)
        .map(|_| compose_batch(&index, &pairs, &single_ids, &sampling, &size_of, &mut rng))
        .collect::<babel_core::Result<Vec<_>>>()?;
    out.write_jsonl("pairs/batches.jsonl", &batches)?;
    println!(
        "{} training pairs over {} images; {} batches written",
        pairs.len(),
        eligible.len(),
        batches.len()
    );
    out.finish()?;
    Ok(())
}

pub fn augment(ctx: &Ctx) -> CliResult<()> {
    let mut out = ctx.run_dir("augment")?;
    let corpus = ctx.corpus()?;
    let (_, index) = ctx.index()?;
    let pairs = augment_caption_pairs(&corpus, &index, ctx.cfg.pairs.iou_threshold)?;
    let records = to_augmented_records(&corpus, &pairs)?;
    out.write_jsonl("augment/captions.jsonl", &records)?;
    let transferred = pairs
        .iter()
        .filter(|p| matches!(p.provenance, Provenance::Transferred { .. }))
        .count();
    out.write_json(
        "augment/summary.json",
        &serde_json::json!({
            "iou_threshold": ctx.cfg.pairs.iou_threshold,
            "original": pairs.len() - transferred,
            "transferred": transferred,
        }),
    )?;
    println!("{} caption pairs ({transferred} transferred)", pairs.len());
    out.finish()?;
    Ok(())
}

pub fn synth(ctx: &Ctx, with_images: bool) -> CliResult<()> {
    let fixture_dir = &ctx.paths.fixture;
    let prefix = fixture_dir
        .strip_prefix(&ctx.paths.output)
        .map(|p| p.to_string_lossy().replace('\\', "/"))
        .unwrap_or_else(|_| "fixture".into());
    let mut out = ctx.run_dir(&prefix)?;
    let spec = SceneSpec {
        seed: derive_seed(ctx.cfg.seed, "synth"),
        ..ctx.cfg.synth.clone()
    };
    let fixture = generate(&spec)?;
    if fixture_dir.exists() {
        std::fs::remove_dir_all(fixture_dir)?;
    }
    for rel in fixture.write(fixture_dir, with_images)? {
        out.record(&fixture_dir.join(rel))?;
    }
    let checks = serde_json::to_string_pretty(&fixture.checks)? + "\n";
    let checks_path = fixture_dir.join("truth/checks.json");
    babel_core::corpus::write_bytes(&checks_path, checks.as_bytes())?;
    out.record(&checks_path)?;
    println!(
        "fixture: {} landmarks, {} reconstructions, {} images, planted {:?}",
        spec.landmarks,
        fixture.reconstructions.len(),
        fixture.corpus.len(),
        fixture.planted()
    );
    out.finish()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SelftestReport {
    passed: bool,
    checks: Vec<selftest::CheckOutcome>,
}

pub fn selftest(ctx: &Ctx, seeds: u64, instances: u64) -> CliResult<()> {
    let mut out = ctx.run_dir("selftest")?;
    let mut checks = selftest::gradient_suite(seeds)?;
    checks.extend(selftest::closed_form_suite()?);
    checks.extend(selftest::oracle_suite(instances, derive_seed(ctx.cfg.seed, "selftest"))?);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    out.write_json(
        "selftest/report.json",
        &SelftestReport {
            passed: failed == 0,
            checks,
        },
    )?;
    out.finish()?;
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}

/// Rows of the synthetic fixture's truth file keyed by image.
pub fn image_truth(path: &Path) -> CliResult<BTreeMap<ImageId, synth::ImageTruth>> {
    let rows: Vec<synth::ImageTruth> = read_jsonl(path)?;
    Ok(rows.into_iter().map(|t| (t.image_id.clone(), t)).collect())
}

pub fn read_pairs(ctx: &Ctx) -> CliResult<Vec<ImagePair>> {
    Ok(read_jsonl(&ctx.stage_file(PAIRS_FILE, "pairs")?)?)
}
