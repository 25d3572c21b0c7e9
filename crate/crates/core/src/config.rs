//! Flat key=value experiment configuration.
//!
//! A config file is a list of `key = value` lines (`#` comments allowed).
//! Every key has a default; unknown keys are rejected. The config hash is
//! the SHA-256 of the canonical sorted `key=value` listing of the effective
//! configuration (after defaults and `--set` overrides), so reports carry
//! exact provenance.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::SceneSpec;
use crate::detector::DetectorSpec;
use crate::error::{Error, Result};
use crate::imitation::{ImitationConfig, Metric};
use crate::reweight::{MacroWeight, MicroWeight};

/// Which matched stages receive imitation loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageSubset {
    All,
    None,
    /// Stages that carry detection heads.
    Heads,
    /// First half of the matched stages (rounded down).
    Early,
    /// Remaining later stages.
    Late,
    Indices(Vec<usize>),
}

impl FromStr for StageSubset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => return Ok(StageSubset::All),
            "none" => return Ok(StageSubset::None),
            "heads" => return Ok(StageSubset::Heads),
            "early" => return Ok(StageSubset::Early),
            "late" => return Ok(StageSubset::Late),
            _ => {}
        }
        let mut idx = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            if let Some((a, b)) = part.split_once('-') {
                let a: usize = a.trim().parse().map_err(|_| bad_subset(s))?;
                let b: usize = b.trim().parse().map_err(|_| bad_subset(s))?;
                if b < a {
                    return Err(bad_subset(s));
                }
                idx.extend(a..=b);
            } else {
                idx.push(part.parse().map_err(|_| bad_subset(s))?);
            }
        }
        if idx.is_empty() {
            return Err(bad_subset(s));
        }
        idx.sort_unstable();
        idx.dedup();
        Ok(StageSubset::Indices(idx))
    }
}

fn bad_subset(s: &str) -> Error {
    Error::Config(format!(
        "invalid stage subset `{s}` (use all|none|heads|early|late or indices like 0,2 or 0-2)"
    ))
}

impl std::fmt::Display for StageSubset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageSubset::All => f.write_str("all"),
            StageSubset::None => f.write_str("none"),
            StageSubset::Heads => f.write_str("heads"),
            StageSubset::Early => f.write_str("early"),
            StageSubset::Late => f.write_str("late"),
            StageSubset::Indices(v) => {
                let parts: Vec<String> = v.iter().map(|i| i.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl StageSubset {
    /// Concrete pair indices for a plan with `num_pairs` matched stages.
    pub fn resolve(&self, num_pairs: usize, head_pairs: &[usize]) -> Vec<usize> {
        match self {
            StageSubset::All => (0..num_pairs).collect(),
            StageSubset::None => Vec::new(),
            StageSubset::Heads => head_pairs.iter().copied().filter(|&i| i < num_pairs).collect(),
            StageSubset::Early => (0..num_pairs / 2).collect(),
            StageSubset::Late => (num_pairs / 2..num_pairs).collect(),
            StageSubset::Indices(v) => v.iter().copied().filter(|&i| i < num_pairs).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    // dataset
    pub data_seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub max_objects: usize,
    pub dataset_dir: Option<PathBuf>,
    // model
    pub teacher_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub head_stages: Vec<usize>,
    pub anchor_scales: Vec<f64>,
    // imitation
    pub metric: Metric,
    pub macro_weight: MacroWeight,
    pub micro_weight: MicroWeight,
    pub gamma: f64,
    pub lambda1: f64,
    /// `None` means auto-scale once at warmup end.
    pub lambda2: Option<f64>,
    pub epsilon: f64,
    pub stages: StageSubset,
    // schedule
    pub epochs: usize,
    /// `None` means 10% of the run's epochs (at least 1).
    pub warmup_epochs: Option<usize>,
    pub distill_epoch_factor: f64,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// `None` means 60% and 80% of the run's epochs.
    pub lr_milestones: Option<Vec<usize>>,
    pub batch_size: usize,
    // run
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub eval_score_thresh: f64,
    pub eval_nms_iou: f64,
    pub dump_weight_maps: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_seed: 7,
            train_count: 400,
            test_count: 100,
            image_size: 64,
            num_classes: 2,
            max_objects: 4,
            dataset_dir: None,
            teacher_widths: vec![16, 32, 64, 64],
            blocks_per_stage: 2,
            head_stages: vec![1, 2, 3],
            anchor_scales: vec![2.4, 1.9, 1.4],
            metric: Metric::Cosine,
            macro_weight: MacroWeight::None,
            micro_weight: MicroWeight::None,
            gamma: 2.0,
            lambda1: 1.0,
            lambda2: None,
            epsilon: 1e-8,
            stages: StageSubset::All,
            epochs: 20,
            warmup_epochs: None,
            distill_epoch_factor: 1.25,
            lr: 0.1,
            lr_decay_factor: 0.1,
            lr_milestones: None,
            batch_size: 8,
            seed: 1,
            seeds: vec![1, 2, 3],
            out_dir: PathBuf::from("runs/default"),
            eval_score_thresh: 0.05,
            eval_nms_iou: 0.45,
            dump_weight_maps: false,
        }
    }
}

fn parse_list<T: FromStr>(value: &str, key: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad element `{p}` in `{key}`")))
        })
        .collect()
}

fn parse_one<T: FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{source}:{}: expected `key = value`", i + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{source}:{}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    /// Apply `key=value` overrides (the CLI's `--set`).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_seed" => self.data_seed = parse_one(value, key)?,
            "train_count" => self.train_count = parse_one(value, key)?,
            "test_count" => self.test_count = parse_one(value, key)?,
            "image_size" => self.image_size = parse_one(value, key)?,
            "num_classes" => self.num_classes = parse_one(value, key)?,
            "max_objects" => self.max_objects = parse_one(value, key)?,
            "dataset_dir" => {
                self.dataset_dir = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "teacher_widths" => self.teacher_widths = parse_list(value, key)?,
            "blocks_per_stage" => self.blocks_per_stage = parse_one(value, key)?,
            "head_stages" => self.head_stages = parse_list(value, key)?,
            "anchor_scales" => self.anchor_scales = parse_list(value, key)?,
            "metric" => self.metric = value.parse()?,
            "macro_weight" => self.macro_weight = value.parse()?,
            "micro_weight" => self.micro_weight = value.parse()?,
            "gamma" => self.gamma = parse_one(value, key)?,
            "lambda1" => self.lambda1 = parse_one(value, key)?,
            "lambda2" => {
                self.lambda2 = if value == "auto" {
                    None
                } else {
                    Some(parse_one(value, key)?)
                }
            }
            "epsilon" => self.epsilon = parse_one(value, key)?,
            "stages" => self.stages = value.parse()?,
            "epochs" => self.epochs = parse_one(value, key)?,
            "warmup_epochs" => {
                self.warmup_epochs = if value == "auto" {
                    None
                } else {
                    Some(parse_one(value, key)?)
                }
            }
            "distill_epoch_factor" => self.distill_epoch_factor = parse_one(value, key)?,
            "lr" => self.lr = parse_one(value, key)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_one(value, key)?,
            "lr_milestones" => {
                self.lr_milestones = if value == "auto" {
                    None
                } else {
                    Some(parse_list(value, key)?)
                }
            }
            "batch_size" => self.batch_size = parse_one(value, key)?,
            "seed" => self.seed = parse_one(value, key)?,
            "seeds" => self.seeds = parse_list(value, key)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "eval_score_thresh" => self.eval_score_thresh = parse_one(value, key)?,
            "eval_nms_iou" => self.eval_nms_iou = parse_one(value, key)?,
            "dump_weight_maps" => self.dump_weight_maps = parse_one(value, key)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Canonical sorted listing of the effective configuration.
    pub fn canonical(&self) -> String {
        let mut pairs = vec![
            ("anchor_scales", Self::fmt_list(&self.anchor_scales)),
            ("batch_size", self.batch_size.to_string()),
            ("blocks_per_stage", self.blocks_per_stage.to_string()),
            ("data_seed", self.data_seed.to_string()),
            (
                "dataset_dir",
                self.dataset_dir
                    .as_ref()
                    .map_or("none".into(), |p| p.display().to_string()),
            ),
            (
                "distill_epoch_factor",
                self.distill_epoch_factor.to_string(),
            ),
            ("dump_weight_maps", self.dump_weight_maps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("eval_nms_iou", self.eval_nms_iou.to_string()),
            ("eval_score_thresh", self.eval_score_thresh.to_string()),
            ("gamma", self.gamma.to_string()),
            ("head_stages", Self::fmt_list(&self.head_stages)),
            ("image_size", self.image_size.to_string()),
            ("lambda1", self.lambda1.to_string()),
            (
                "lambda2",
                self.lambda2.map_or("auto".into(), |v| v.to_string()),
            ),
            ("lr", self.lr.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            (
                "lr_milestones",
                self.lr_milestones
                    .as_ref()
                    .map_or("auto".into(), |v| Self::fmt_list(v)),
            ),
            (
                "macro_weight",
                self.macro_weight.to_string(),
            ),
            ("max_objects", self.max_objects.to_string()),
            ("metric", self.metric.to_string()),
            ("micro_weight", self.micro_weight.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("seeds", Self::fmt_list(&self.seeds)),
            ("stages", self.stages.to_string()),
            ("teacher_widths", Self::fmt_list(&self.teacher_widths)),
            ("test_count", self.test_count.to_string()),
            ("train_count", self.train_count.to_string()),
            (
                "warmup_epochs",
                self.warmup_epochs.map_or("auto".into(), |v| v.to_string()),
            ),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        let mut out = String::with_capacity(64);
        for b in Sha256::digest(self.canonical().as_bytes()) {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            image_size: self.image_size,
            num_classes: self.num_classes,
            max_objects: self.max_objects,
        }
    }

    pub fn teacher_spec(&self) -> DetectorSpec {
        DetectorSpec {
            input_size: self.image_size,
            in_channels: 3,
            stage_widths: self.teacher_widths.clone(),
            blocks_per_stage: self.blocks_per_stage,
            head_stages: self.head_stages.clone(),
            num_classes: self.num_classes,
            anchor_scales: self.anchor_scales.clone(),
        }
    }

    /// Imitation knobs with a concrete lambda2.
    pub fn imitation(&self, lambda2: f64) -> ImitationConfig {
        ImitationConfig {
            metric: self.metric,
            macro_weight: self.macro_weight,
            micro_weight: self.micro_weight,
            gamma: self.gamma,
            lambda1: self.lambda1,
            lambda2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher_spec().validate()?;
        self.imitation(self.lambda2.unwrap_or(1.0)).validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config("train_count and test_count must be >= 1".into()));
        }
        if self.distill_epoch_factor < 1.0 {
            return Err(Error::Config("distill_epoch_factor must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_and_hash_stability() {
        let text = "epochs = 12\nmetric = l2\nstages = heads\nlambda2 = 0.5\n# comment\n";
        let cfg = ExperimentConfig::parse(text, "test").unwrap();
        assert_eq!(cfg.epochs, 12);
        assert_eq!(cfg.metric, Metric::L2);
        assert_eq!(cfg.stages, StageSubset::Heads);
        assert_eq!(cfg.lambda2, Some(0.5));

        // identical effective config => identical hash, regardless of order
        let cfg2 =
            ExperimentConfig::parse("stages=heads\nlambda2=0.5\nmetric=l2\nepochs=12", "t").unwrap();
        assert_eq!(cfg.hash(), cfg2.hash());
        // config round-trip: written values equal read values
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let err = ExperimentConfig::parse("epochz = 3", "test").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("epochz"));
    }

    #[test]
    fn subset_grammar() {
        assert_eq!("all".parse::<StageSubset>().unwrap(), StageSubset::All);
        assert_eq!(
            "0-2".parse::<StageSubset>().unwrap(),
            StageSubset::Indices(vec![0, 1, 2])
        );
        assert_eq!(
            "3,1".parse::<StageSubset>().unwrap(),
            StageSubset::Indices(vec![1, 3])
        );
        assert!("what".parse::<StageSubset>().is_err());
    }

    #[test]
    fn subset_resolution() {
        let heads = vec![1, 2, 3];
        assert_eq!(StageSubset::All.resolve(4, &heads), vec![0, 1, 2, 3]);
        assert_eq!(StageSubset::None.resolve(4, &heads), Vec::<usize>::new());
        assert_eq!(StageSubset::Heads.resolve(4, &heads), vec![1, 2, 3]);
        assert_eq!(StageSubset::Early.resolve(4, &heads), vec![0, 1]);
        assert_eq!(StageSubset::Late.resolve(4, &heads), vec![2, 3]);
        assert_eq!(
            StageSubset::Indices(vec![0, 9]).resolve(4, &heads),
            vec![0]
        );
    }

    #[test]
    fn override_application() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&["epochs=3".into(), "lambda2=auto".into()])
            .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lambda2, None);
        assert!(cfg.apply_overrides(&["nope".into()]).is_err());
    }
}
