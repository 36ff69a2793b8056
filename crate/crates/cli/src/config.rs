//! Experiment configuration (TOML). Every section is optional; unknown keys
//! anywhere are rejected before any work starts.
//!
//! ```toml
//! task = "uci-regression"
//! seed = 7
//! jobs = 4
//! out = "results/uci"
//! data_dir = "data/uci"
//!
//! [train]
//! epochs = 40
//! batch_size = 32
//!
//! [uci]
//! datasets = ["boston-housing", "concrete"]
//! members = 5
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tinyde_core::cim::CLIP_QUANTILE;
use tinyde_core::ensemble::Mode;
use tinyde_core::TrainConfig;

use crate::error::{CliError, CliResult};
use crate::registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    UciRegression,
    OodClassification,
    CostCensus,
    CimStudy,
}

impl TaskId {
    pub fn id(self) -> &'static str {
        match self {
            TaskId::UciRegression => "uci-regression",
            TaskId::OodClassification => "ood-classification",
            TaskId::CostCensus => "cost-census",
            TaskId::CimStudy => "cim-study",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// When set, must match the subcommand.
    pub task: Option<TaskId>,
    /// Master seed. Fold, member and corruption seeds are derived from it;
    /// `train.seed` is overwritten.
    pub seed: u64,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub uci: UciConfig,
    pub ood: OodConfig,
    pub cost: CostConfig,
    pub cim: CimConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: None,
            seed: 0,
            jobs: 1,
            out: None,
            data_dir: None,
            train: TrainConfig::default(),
            uci: UciConfig::default(),
            ood: OodConfig::default(),
            cost: CostConfig::default(),
            cim: CimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UciConfig {
    pub datasets: Vec<String>,
    pub members: usize,
    /// Overrides the per-dataset width (50, or 100 for the two large sets).
    pub hidden_width: Option<usize>,
    pub hidden_layers: usize,
    /// Overrides the per-dataset split count.
    pub folds: Option<usize>,
    /// `sequential`: two-phase training; `parallel`: single-shot training.
    pub mode: Mode,
    /// Also train a single model per fold for comparison.
    pub ablation: bool,
}

impl Default for UciConfig {
    fn default() -> Self {
        UciConfig {
            datasets: ["boston-housing", "concrete", "energy", "yacht"]
                .map(String::from)
                .to_vec(),
            members: 5,
            hidden_width: None,
            hidden_layers: 2,
            folds: None,
            mode: Mode::Sequential,
            ablation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodConfig {
    pub members: Vec<usize>,
    pub train_size: usize,
    pub test_size: usize,
    pub sigma_scale: f64,
    pub hidden: Vec<usize>,
    pub bins: usize,
    pub mode: Mode,
}

impl Default for OodConfig {
    fn default() -> Self {
        OodConfig {
            members: vec![1, 5, 10],
            train_size: 1000,
            test_size: 1000,
            sigma_scale: 2.0,
            hidden: vec![32, 32],
            bins: 20,
            mode: Mode::Sequential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// `resnet32`, `uci-mlp`, or a path to a TOML/JSON layer spec.
    pub spec: String,
    pub members: Vec<u64>,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            spec: "resnet32".into(),
            members: (1..=10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CimConfig {
    pub dataset: String,
    pub members: usize,
    pub bits: Vec<u32>,
    pub clip_quantile: f64,
    /// Write the per-pass routing trace of the ideal run.
    pub trace: bool,
}

impl Default for CimConfig {
    fn default() -> Self {
        CimConfig {
            dataset: "boston-housing".into(),
            members: 5,
            bits: vec![4, 6, 8, 10, 12],
            clip_quantile: CLIP_QUANTILE,
            trace: false,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    /// Checks the sections relevant to `task`.
    pub fn validate(&self, task: TaskId) -> CliResult<()> {
        if let Some(t) = self.task {
            if t != task {
                return Err(invalid(format!(
                    "config is for task `{}` but `{}` was requested",
                    t.id(),
                    task.id()
                )));
            }
        }
        if self.jobs == 0 {
            return Err(invalid("jobs must be at least 1"));
        }
        let train = &self.train;
        if train.epochs == 0 || train.batch_size < 2 {
            return Err(invalid(
                "train.epochs must be >= 1 and train.batch_size >= 2",
            ));
        }
        if !(train.optimizer.learning_rate >= 0.0) || !(train.init_jitter >= 0.0) {
            return Err(invalid(
                "train.optimizer.learning_rate and train.init_jitter must be >= 0",
            ));
        }
        match task {
            TaskId::UciRegression => {
                let u = &self.uci;
                if u.datasets.is_empty() {
                    return Err(invalid("uci.datasets is empty"));
                }
                for d in &u.datasets {
                    registry::lookup(d)?;
                }
                if u.members == 0
                    || u.hidden_layers == 0
                    || u.hidden_width == Some(0)
                    || u.folds == Some(0)
                {
                    return Err(invalid(
                        "uci.members, hidden_layers, hidden_width and folds must be positive",
                    ));
                }
            }
            TaskId::OodClassification => {
                let o = &self.ood;
                if o.members.is_empty() || o.members.contains(&0) {
                    return Err(invalid(
                        "ood.members must be a non-empty list of positive sizes",
                    ));
                }
                if o.train_size < 2 || o.test_size < 2 || o.bins == 0 || o.hidden.contains(&0) {
                    return Err(invalid(
                        "ood sizes, bins and hidden widths must be positive",
                    ));
                }
                if !(o.sigma_scale >= 0.0) {
                    return Err(invalid("ood.sigma_scale must be >= 0"));
                }
            }
            TaskId::CostCensus => {
                if self.cost.members.is_empty() || self.cost.members.contains(&0) {
                    return Err(invalid(
                        "cost.members must be a non-empty list of positive sizes",
                    ));
                }
            }
            TaskId::CimStudy => {
                let c = &self.cim;
                registry::lookup(&c.dataset)?;
                if c.members == 0
                    || c.bits.is_empty()
                    || c.bits.iter().any(|&b| !(1..=52).contains(&b))
                {
                    return Err(invalid(
                        "cim.members must be positive and cim.bits within 1..=52",
                    ));
                }
                if !(0.5..=1.0).contains(&c.clip_quantile) {
                    return Err(invalid("cim.clip_quantile must be in [0.5, 1]"));
                }
            }
        }
        Ok(())
    }
}
