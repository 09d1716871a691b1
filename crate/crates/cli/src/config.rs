use std::path::{Path, PathBuf};

use babel_core::evaluation::DEFAULT_POOL_SIZE;
use babel_core::fusion::{ConceptPolarity, DEFAULT_PHI, STRICT_PHI};
use babel_core::mining::DistillThresholds;
use babel_core::numerics::Aggregator;
use babel_core::pairs::DEFAULT_IOU_THRESHOLD;
use babel_core::synth::{self, SceneSpec};
use babel_core::trainer::{ModelConfig, TrainConfig, DEFAULT_BACKGROUND_POWER};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const EFFECTIVE_CONFIG: &str = "config.effective.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Input locations. Unset entries resolve inside `fixture`, which itself
/// defaults to `<output>/fixture`, so `synth` followed by any stage works
/// without a config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub output: Option<PathBuf>,
    pub fixture: Option<PathBuf>,
    pub reconstructions: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub nouns: Option<PathBuf>,
    pub blocklist: Option<PathBuf>,
    pub connectors: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub image_truth: Option<PathBuf>,
    /// Externally produced rankings for the retrieval metrics (JSONL).
    pub retrievals: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingSection {
    /// Replaces the built-in connector list when set.
    pub connectors: Option<Vec<String>>,
    pub plural_folding: bool,
    /// Resample training singles to this many per class.
    pub balance_target: Option<usize>,
}

impl Default for LabelingSection {
    fn default() -> Self {
        Self {
            connectors: None,
            plural_folding: false,
            balance_target: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairsSection {
    /// Minimum shared keypoints for a training pair.
    pub min_shared: usize,
    pub iou_threshold: f64,
    /// Sample batches written by `pairs`.
    pub batches: usize,
}

impl Default for PairsSection {
    fn default() -> Self {
        Self {
            min_shared: babel_core::mining::DEFAULT_MIN_SHARED,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            batches: 4,
        }
    }
}

/// Featurizer shape; the class count follows the mined concept set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden1: usize,
    pub hidden2: usize,
    pub feature_dim: usize,
    pub aggregator: Aggregator,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            hidden1: m.hidden1,
            hidden2: m.hidden2,
            feature_dim: m.feature_dim,
            aggregator: m.aggregator,
        }
    }
}

impl ModelSection {
    pub fn with_classes(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            classes,
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            feature_dim: self.feature_dim,
            aggregator: self.aggregator,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub phi: Vec<f64>,
    pub background_power: i32,
    /// Restrict fusion to these landmarks.
    pub landmarks: Option<Vec<String>>,
    pub include_ambiguous: bool,
    pub interior: Vec<String>,
    pub exterior: Vec<String>,
}

impl Default for FusionSection {
    fn default() -> Self {
        let p = ConceptPolarity::reference();
        Self {
            phi: vec![DEFAULT_PHI, STRICT_PHI],
            background_power: DEFAULT_BACKGROUND_POWER,
            landmarks: None,
            include_ambiguous: true,
            interior: p.interior().iter().cloned().collect(),
            exterior: p.exterior().iter().cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub pool_size: usize,
    pub recall_k: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            pool_size: DEFAULT_POOL_SIZE,
            recall_k: vec![1, 5, 10],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub precision: Precision,
    pub paths: Paths,
    pub mining: DistillThresholds,
    pub labeling: LabelingSection,
    pub pairs: PairsSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub fusion: FusionSection,
    pub eval: EvalSection,
    pub synth: SceneSpec,
}

/// Resolved input and output locations.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub output: PathBuf,
    pub fixture: PathBuf,
    pub reconstructions: PathBuf,
    pub corpus: PathBuf,
    pub nouns: PathBuf,
    pub blocklist: PathBuf,
    pub connectors: Option<PathBuf>,
    pub images: PathBuf,
    pub image_truth: PathBuf,
    pub retrievals: Option<PathBuf>,
}

fn invalid(section: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("[{section}] {e}"))
}

impl FusionSection {
    pub fn polarity(&self) -> babel_core::Result<ConceptPolarity> {
        ConceptPolarity::new(self.interior.iter().cloned(), self.exterior.iter().cloned())
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.mining.validate().map_err(|e| invalid("mining", e))?;
        self.synth.validate().map_err(|e| invalid("synth", e))?;
        self.train.validate().map_err(|e| invalid("train", e))?;
        self.model.with_classes(1).validate().map_err(|e| invalid("model", e))?;
        if self.pairs.min_shared == 0 {
            return Err(invalid("pairs", "min_shared must be at least 1"));
        }
        if !self.pairs.iou_threshold.is_finite() {
            return Err(invalid("pairs", "iou_threshold must be finite"));
        }
        if self.fusion.phi.is_empty() || self.fusion.phi.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(invalid("fusion", "every phi must lie in [0, 1)"));
        }
        if self.fusion.background_power < 1 {
            return Err(invalid("fusion", "background_power must be at least 1"));
        }
        self.fusion.polarity().map_err(|e| invalid("fusion", e))?;
        if self.eval.pool_size == 0 || self.eval.recall_k.iter().any(|&k| k == 0) {
            return Err(invalid("eval", "pool_size and every K must be positive"));
        }
        if self.labeling.balance_target == Some(0) {
            return Err(invalid("labeling", "balance_target must be positive"));
        }
        Ok(())
    }

    pub fn resolve(&self) -> Resolved {
        let p = &self.paths;
        let output = p.output.clone().unwrap_or_else(|| PathBuf::from("run"));
        let fixture = p.fixture.clone().unwrap_or_else(|| output.join("fixture"));
        let or = |v: &Option<PathBuf>, rel: &str| v.clone().unwrap_or_else(|| fixture.join(rel));
        Resolved {
            reconstructions: or(&p.reconstructions, synth::RECONSTRUCTIONS_DIR),
            corpus: or(&p.corpus, synth::CORPUS_FILE),
            nouns: or(&p.nouns, synth::NOUNS_FILE),
            blocklist: or(&p.blocklist, synth::BLOCKLIST_FILE),
            connectors: p.connectors.clone(),
            images: or(&p.images, synth::IMAGES_DIR),
            image_truth: or(&p.image_truth, synth::IMAGE_TRUTH_FILE),
            retrievals: p.retrievals.clone(),
            fixture,
            output,
        }
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }
}

/// Parse an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

/// Apply `a.b.c=value` to a TOML tree, creating tables as needed.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override key {key:?}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Config file (if any), then `--set` overrides, then dedicated flags.
pub fn load(
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    output: Option<&Path>,
) -> CliResult<PipelineConfig> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::MissingInput(format!("config {}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: PipelineConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = output {
        cfg.paths.output = Some(o.to_path_buf());
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn defaults_carry_reference_constants() {
        let c = PipelineConfig::default();
        assert_eq!(c.mining.min_shared, 10);
        assert_eq!(c.mining.min_landmarks, 25);
        assert_eq!(c.mining.min_rho, 0.08);
        assert_eq!(c.mining.min_nodes, 10);
        assert_eq!(c.train.loss.tau, 0.07);
        assert_eq!(c.train.loss.negatives, 16);
        assert_eq!(c.train.loss.lambda, 0.3);
        assert_eq!(c.train.loss.margin, 3.0);
        assert_eq!(c.fusion.phi, vec![0.5, 0.75]);
        assert_eq!(c.fusion.background_power, 4);
        assert_eq!(c.pairs.iou_threshold, 0.3);
    }

    #[test]
    fn flags_win_over_overrides() {
        let cfg = load(None, &["seed=5".into(), "mining.min_rho=1.1".into()], Some(9), None).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.mining.min_rho, 1.1);
    }

    #[test]
    fn override_values_parse_as_toml() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "fusion.phi=[0.6]").unwrap();
        apply_override(&mut t, "paths.output=out/a").unwrap();
        apply_override(&mut t, "model.aggregator.kind=\"mean_pool\"").unwrap();
        let cfg: PipelineConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.fusion.phi, vec![0.6]);
        assert_eq!(cfg.paths.output, Some(PathBuf::from("out/a")));
        assert_eq!(cfg.model.aggregator, Aggregator::MeanPool);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in ["mining.min_nodes=1", "fusion.phi=[1.0]", "train.schedule.epochs=0", "nope=1"] {
            assert!(load(None, &[bad.into()], None, None).is_err(), "{bad}");
        }
        assert!(load(None, &["novalue".into()], None, None).is_err());
    }

    #[test]
    fn paths_default_into_the_fixture() {
        let r = load(None, &[], None, Some(Path::new("o"))).unwrap().resolve();
        assert_eq!(r.corpus, Path::new("o/fixture/corpus.jsonl"));
        assert_eq!(r.images, Path::new("o/fixture/images"));
    }
}
