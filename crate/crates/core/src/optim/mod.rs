//! Two-stage hyperparameter search and two-stage fine-tuning.
//!
//! Stage one of the search enumerates a coarse grid (log dimensions at decade
//! steps); stage two shrinks the space around the incumbent and runs
//! sequential TPE suggestions. Fine-tuning first trains the head with a
//! frozen backbone, then unfreezes the backbone in two groups (deep first) at
//! a tenth of the stage-one learning rate with stepped decay.

mod grid;
mod schedule;
mod tpe;
mod train;

pub use grid::{discretize_space, grid_search, space_from_grid_values};
pub use schedule::{step_lr, FinetuneSchedule};
pub use tpe::{refine_search, sample_uniform_config, tpe_suggest, TpeParams};
pub use train::{stage1_train, stage2_finetune, EpochLog, StageResult, TrainOptions};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A hyperparameter value: continuous or categorical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Float(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Float(v) => Some(*v),
            ParamValue::Str(_) => None,
        }
    }
}

pub type TrialConfig = BTreeMap<String, ParamValue>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DimKind {
    LogUniform { lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    Categorical { choices: Vec<ParamValue> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    #[serde(flatten)]
    pub kind: DimKind,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dim>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("search space has no dimensions".into()));
        }
        for d in &self.dims {
            match &d.kind {
                DimKind::LogUniform { lo, hi } => {
                    if *lo <= 0.0 || hi < lo {
                        return Err(Error::Config(format!(
                            "log dimension '{}' needs 0 < lo <= hi, got [{lo}, {hi}]",
                            d.name
                        )));
                    }
                }
                DimKind::Uniform { lo, hi } => {
                    if hi < lo {
                        return Err(Error::Config(format!(
                            "dimension '{}' has unordered bounds [{lo}, {hi}]",
                            d.name
                        )));
                    }
                }
                DimKind::Categorical { choices } => {
                    if choices.is_empty() {
                        return Err(Error::Config(format!(
                            "categorical dimension '{}' has no choices",
                            d.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, config: &TrialConfig) -> bool {
        self.dims.iter().all(|d| match (config.get(&d.name), &d.kind) {
            (Some(ParamValue::Float(v)), DimKind::LogUniform { lo, hi })
            | (Some(ParamValue::Float(v)), DimKind::Uniform { lo, hi }) => v >= lo && v <= hi,
            (Some(v), DimKind::Categorical { choices }) => choices.contains(v),
            _ => false,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStage {
    Grid,
    Tpe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config: TrialConfig,
    /// Validation accuracy; higher is better. NaN-free for complete trials.
    pub objective: f64,
    pub stage: SearchStage,
    pub seed: u64,
    pub status: TrialStatus,
}

impl TrialRecord {
    pub fn is_complete(&self) -> bool {
        self.status == TrialStatus::Complete
    }
}

/// Best complete trial; ties break toward the earliest.
pub fn best_trial(history: &[TrialRecord]) -> Option<&TrialRecord> {
    let mut best: Option<&TrialRecord> = None;
    for t in history.iter().filter(|t| t.is_complete()) {
        if best.map_or(true, |b| t.objective > b.objective) {
            best = Some(t);
        }
    }
    best
}
