//! Run configuration: JSON sections, validation, and stable hashing.
//!
//! Unknown keys are rejected so a config file hashes to exactly what ran.
//! The hash is the SHA-256 of the canonical serialization (struct fields in
//! declaration order, maps sorted), which keys every artifact a run emits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attnclf::{BackboneSpec, LossConfig};
use crate::corpus::{KaokoreNames, ManifestFormat, Task};
use crate::error::{Error, Result};
use crate::optim::ParamValue;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub root: PathBuf,
    pub format: ManifestFormat,
    pub task: Task,
    /// (train, val, test); applied when the source has no split assignments
    /// or `resplit` is set.
    pub split_fractions: (f64, f64, f64),
    pub seed: u64,
    #[serde(default)]
    pub image_size: Option<u32>,
    #[serde(default)]
    pub resplit: bool,
    /// Integer-code to name tables for the Kaokore layout.
    #[serde(default)]
    pub kaokore_names: Option<KaokoreNames>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSection {
    /// "vgg19" (paper scale) or "desk" (reduced CPU encoder).
    pub encoder: String,
    pub iterations: usize,
    pub style_weight: f64,
    pub lr: f64,
    pub batch: usize,
    pub blend: f64,
    /// Optional checkpoint with pretrained engine weights.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// Train one decoder per class instead of a pooled one.
    #[serde(default)]
    pub per_class: bool,
}

impl Default for StyleSection {
    fn default() -> Self {
        StyleSection {
            encoder: "desk".into(),
            iterations: 20_000,
            style_weight: 10.0,
            lr: 1e-4,
            batch: 8,
            blend: 1.0,
            weights: None,
            per_class: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub p1: f64,
    pub p2: f64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub allow_above_one: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneSpec,
    pub proj_width: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    #[serde(default = "default_tinycnn_widths")]
    pub tinycnn_widths: [usize; 4],
    /// Pretrained classifier/backbone weights to load.
    #[serde(default)]
    pub weights: Option<PathBuf>,
}

fn default_tinycnn_widths() -> [usize; 4] {
    [8, 16, 32, 64]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch: usize,
    pub epochs: usize,
    pub optimizer: String,
    pub lr: f64,
    #[serde(default)]
    pub stage2_epochs: usize,
    #[serde(default = "default_step_size")]
    pub step_size: usize,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
}

fn default_step_size() -> usize {
    10
}

fn default_decay() -> f64 {
    0.1
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch: 64,
            epochs: 20,
            optimizer: "adam".into(),
            lr: 1e-4,
            stage2_epochs: 20,
            step_size: 10,
            decay_factor: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    /// Explicit grid values per hyperparameter name.
    pub grid: BTreeMap<String, Vec<ParamValue>>,
    pub tpe_trials: usize,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    #[serde(default = "default_candidates")]
    pub n_candidates: usize,
    #[serde(default = "default_startup")]
    pub n_startup: usize,
    /// Stage-one epochs per search trial.
    #[serde(default = "default_search_epochs")]
    pub epochs: usize,
}

fn default_quantile() -> f64 {
    0.25
}

fn default_candidates() -> usize {
    24
}

fn default_startup() -> usize {
    10
}

fn default_search_epochs() -> usize {
    1
}

impl Default for SearchSection {
    fn default() -> Self {
        let mut grid = BTreeMap::new();
        grid.insert(
            "lr".to_string(),
            [1e-5, 1e-4, 1e-3, 1e-2].iter().map(|&v| ParamValue::Float(v)).collect(),
        );
        grid.insert(
            "weight_decay".to_string(),
            [1e-5, 1e-4, 1e-3].iter().map(|&v| ParamValue::Float(v)).collect(),
        );
        grid.insert(
            "dropout".to_string(),
            [0.1, 0.25, 0.5].iter().map(|&v| ParamValue::Float(v)).collect(),
        );
        SearchSection {
            grid,
            tpe_trials: 100,
            quantile: 0.25,
            n_candidates: 24,
            n_startup: 10,
            epochs: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub style: StyleSection,
    pub augment: AugmentSection,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub search: SearchSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.dataset.split_fractions;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "dataset.split_fractions must be non-negative and sum to 1, got {:?}",
                self.dataset.split_fractions
            )));
        }
        if !(0.0..=1.0).contains(&self.style.blend) {
            return Err(Error::Config(format!(
                "style.blend must be in [0,1], got {}",
                self.style.blend
            )));
        }
        if self.style.encoder != "desk" && self.style.encoder != "vgg19" {
            return Err(Error::Config(format!(
                "style.encoder must be 'desk' or 'vgg19', got '{}'",
                self.style.encoder
            )));
        }
        for (name, p) in [("p1", self.augment.p1), ("p2", self.augment.p2)] {
            if p < 0.0 {
                return Err(Error::Config(format!("augment.{name} must be non-negative")));
            }
            if p > 1.0 && !self.augment.allow_above_one {
                return Err(Error::Config(format!(
                    "augment.{name} = {p} exceeds 1.0 without allow_above_one"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config(format!(
                "model.dropout must be in [0,1), got {}",
                self.model.dropout
            )));
        }
        if self.train.optimizer != "adam" {
            return Err(Error::Config(format!(
                "train.optimizer: only 'adam' is supported, got '{}'",
                self.train.optimizer
            )));
        }
        if self.train.batch == 0 || self.train.lr <= 0.0 {
            return Err(Error::Config("train.batch and train.lr must be positive".into()));
        }
        if !(0.0 < self.search.quantile && self.search.quantile < 1.0) {
            return Err(Error::Config(format!(
                "search.quantile must be in (0,1), got {}",
                self.search.quantile
            )));
        }
        self.loss.validate()?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canon = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&canon);
        crate::nn::hex_string(&h.finalize()[..16])
    }
}
