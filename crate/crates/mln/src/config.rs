//! Plain-text run configuration: `key = value` lines under
//! `[dataset]` / `[model]` / `[train]` / `[eval]` sections, `#` comments.
//! The `MLN_SEED` environment variable overrides the train and eval seeds.

use crate::embedding::EmbeddingConfig;
use crate::episodes::{self, ClassPools, EpisodeSource};
use crate::error::{MlnError, Result};
use crate::head::{GradientMode, LogitMode};
use crate::trainer::TrainConfig;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    Gaussian,
    FlatBinary,
    ImageDirectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    /// Input dimension for the Gaussian source.
    pub dim: usize,
    pub sigma: f64,
    /// Raster height/width for ingested sources.
    pub height: usize,
    pub width: usize,
    pub rotation: bool,
    /// Class counts for the train/val/test partition of ingested pools.
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Gaussian,
            path: None,
            dim: 16,
            sigma: 0.3,
            height: 0,
            width: 0,
            rotation: false,
            train_classes: 0,
            val_classes: 0,
            test_classes: 0,
        }
    }
}

impl DatasetConfig {
    pub fn input_dim(&self) -> usize {
        match self.kind {
            DatasetKind::Gaussian => self.dim,
            _ => self.height * self.width,
        }
    }

    fn load_pools(&self) -> Result<ClassPools> {
        let path = self
            .path
            .as_ref()
            .ok_or_else(|| MlnError::InvalidConfig("dataset path is required".into()))?;
        match self.kind {
            DatasetKind::FlatBinary => episodes::load_flat_binary(path),
            DatasetKind::ImageDirectory => {
                episodes::load_class_directory(path, self.height, self.width)
            }
            DatasetKind::Gaussian => unreachable!(),
        }
    }

    /// Builds the train- and test-side episode sources. Rotation
    /// augmentation is applied after the class split, per side.
    pub fn sources(&self) -> Result<(EpisodeSource, EpisodeSource)> {
        if self.kind == DatasetKind::Gaussian {
            let s = EpisodeSource::Gaussian { dim: self.dim, sigma: self.sigma };
            return Ok((s.clone(), s));
        }
        let pools = self.load_pools()?;
        let (train, test) = if self.train_classes + self.test_classes > 0 {
            let (tr, _, te) =
                pools.split(self.train_classes, self.val_classes, self.test_classes)?;
            (tr, te)
        } else {
            // no partition given: both sides see everything (smoke-test use)
            (pools.clone(), pools)
        };
        let (train, test) = if self.rotation {
            (episodes::augment_rotations(&train)?, episodes::augment_rotations(&test)?)
        } else {
            (train, test)
        };
        Ok((EpisodeSource::Pools(train), EpisodeSource::Pools(test)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub way: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 1000, way: 5, shots: 1, queries_per_class: 15, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: EmbeddingConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            model: EmbeddingConfig::new(16, vec![64, 64], 12345).unwrap(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

type Sections = BTreeMap<String, BTreeMap<String, String>>;

fn parse_sections(text: &str) -> Result<Sections> {
    let mut sections: Sections = BTreeMap::new();
    let mut current = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
            sections.entry(current.clone()).or_default();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            MlnError::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        if current.is_empty() {
            return Err(MlnError::InvalidConfig(format!(
                "line {}: key outside any [section]",
                lineno + 1
            )));
        }
        sections
            .get_mut(&current)
            .unwrap()
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(sections)
}

fn get<T: std::str::FromStr>(
    section: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match section.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| MlnError::InvalidConfig(format!("bad value for {key}: {v}"))),
    }
}

const KNOWN_SECTIONS: [&str; 4] = ["dataset", "model", "train", "eval"];

/// Parses a config file into a [`RunConfig`], starting from defaults.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let sections = parse_sections(text)?;
    for name in sections.keys() {
        if !KNOWN_SECTIONS.contains(&name.as_str()) {
            return Err(MlnError::InvalidConfig(format!("unknown section [{name}]")));
        }
    }
    let empty = BTreeMap::new();
    let mut cfg = RunConfig::default();

    let ds = sections.get("dataset").unwrap_or(&empty);
    cfg.dataset.kind = match ds.get("source").map(String::as_str) {
        None | Some("gaussian") => DatasetKind::Gaussian,
        Some("flat-binary") => DatasetKind::FlatBinary,
        Some("image-directory") => DatasetKind::ImageDirectory,
        Some(other) => {
            return Err(MlnError::InvalidConfig(format!("unknown dataset source {other}")))
        }
    };
    cfg.dataset.path = ds.get("path").map(PathBuf::from);
    cfg.dataset.dim = get(ds, "dim", cfg.dataset.dim)?;
    cfg.dataset.sigma = get(ds, "sigma", cfg.dataset.sigma)?;
    cfg.dataset.height = get(ds, "height", cfg.dataset.height)?;
    cfg.dataset.width = get(ds, "width", cfg.dataset.width)?;
    cfg.dataset.rotation = get(ds, "rotation", cfg.dataset.rotation)?;
    cfg.dataset.train_classes = get(ds, "train_classes", cfg.dataset.train_classes)?;
    cfg.dataset.val_classes = get(ds, "val_classes", cfg.dataset.val_classes)?;
    cfg.dataset.test_classes = get(ds, "test_classes", cfg.dataset.test_classes)?;

    let md = sections.get("model").unwrap_or(&empty);
    let input_dim = get(md, "input_dim", cfg.dataset.input_dim())?;
    let widths = match md.get("hidden") {
        None => cfg.model.layer_widths[..cfg.model.layer_widths.len() - 1].to_vec(),
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| MlnError::InvalidConfig(format!("bad hidden width {s}")))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let embed_dim = get(md, "embed_dim", cfg.model.output_dim())?;
    let init_seed = get(md, "init_seed", cfg.model.init_seed)?;
    let mut layer_widths = widths;
    layer_widths.push(embed_dim);
    cfg.model = EmbeddingConfig::new(input_dim, layer_widths, init_seed)?;

    let tr = sections.get("train").unwrap_or(&empty);
    cfg.train.episodes = get(tr, "episodes", cfg.train.episodes)?;
    cfg.train.way = get(tr, "way", cfg.train.way)?;
    cfg.train.shots = get(tr, "shots", cfg.train.shots)?;
    cfg.train.queries_per_class = get(tr, "queries", cfg.train.queries_per_class)?;
    cfg.train.n_ref = get(tr, "n_ref", cfg.train.way)?;
    cfg.train.base_lr = get(tr, "lr", cfg.train.base_lr)?;
    cfg.train.decay_factor = get(tr, "decay_factor", cfg.train.decay_factor)?;
    cfg.train.decay_interval = get(tr, "decay_interval", cfg.train.decay_interval)?;
    cfg.train.normalize = get(tr, "normalize", cfg.train.normalize)?;
    cfg.train.seed = get(tr, "seed", cfg.train.seed)?;
    cfg.train.gradient_mode = match tr.get("grad_mode").map(String::as_str) {
        None | Some("stop-gradient-projector") => GradientMode::StopGradientProjector,
        Some("differentiate-projector") => GradientMode::DifferentiateProjector,
        Some(other) => return Err(MlnError::InvalidConfig(format!("unknown grad_mode {other}"))),
    };
    cfg.train.logit_mode = match tr.get("logit_mode").map(String::as_str) {
        None | Some("projected-euclidean") => LogitMode::ProjectedEuclidean,
        Some("projected-inner-product") => LogitMode::ProjectedInnerProduct,
        Some(other) => return Err(MlnError::InvalidConfig(format!("unknown logit_mode {other}"))),
    };

    let ev = sections.get("eval").unwrap_or(&empty);
    cfg.eval.episodes = get(ev, "episodes", cfg.eval.episodes)?;
    cfg.eval.way = get(ev, "way", cfg.eval.way)?;
    cfg.eval.shots = get(ev, "shots", cfg.eval.shots)?;
    cfg.eval.queries_per_class = get(ev, "queries", cfg.eval.queries_per_class)?;
    cfg.eval.seed = get(ev, "seed", cfg.eval.seed)?;

    if let Some(seed) = seed_override()? {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&std::fs::read_to_string(path)?)
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var("MLN_SEED") {
        Err(_) => Ok(None),
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| MlnError::InvalidConfig(format!("MLN_SEED is not a u64: {v}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
# synthetic desk-scale run
[dataset]
source = gaussian
dim = 16
sigma = 0.3

[model]
hidden = 64, 64
embed_dim = 32
init_seed = 9

[train]
episodes = 100
way = 10
shots = 1
queries = 5
lr = 0.003
seed = 4

[eval]
episodes = 50
way = 5
shots = 1
";

    #[test]
    fn parses_sample_config() {
        let cfg = parse_run_config(SAMPLE).unwrap();
        assert_eq!(cfg.dataset.kind, DatasetKind::Gaussian);
        assert_eq!(cfg.dataset.dim, 16);
        assert_eq!(cfg.model.layer_widths, vec![64, 64, 32]);
        assert_eq!(cfg.model.input_dim, 16);
        assert_eq!(cfg.train.episodes, 100);
        assert_eq!(cfg.train.way, 10);
        assert_eq!(cfg.train.n_ref, 10);
        assert_eq!(cfg.train.base_lr, 0.003);
        assert_eq!(cfg.eval.way, 5);
        assert_eq!(cfg.eval.episodes, 50);
    }

    #[test]
    fn rejects_unknown_section_and_garbage() {
        assert!(parse_run_config("[nope]\nx = 1").is_err());
        assert!(parse_run_config("[train]\nepisodes ten").is_err());
        assert!(parse_run_config("orphan = 1").is_err());
        assert!(parse_run_config("[train]\nepisodes = ten").is_err());
    }

    #[test]
    fn defaults_apply_when_sections_missing() {
        let cfg = parse_run_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }
}
