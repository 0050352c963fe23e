use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::fisher::FisherMode;
use crate::importance::Normalization;
use crate::memory::Sampler;
use crate::metrics::HeadMode;
use crate::nn::Label;
use crate::optim::AdamConfig;
use crate::regularizers::{AnchorOptions, Method};

/// Where task data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Directory holding the four standard MNIST IDX files.
    Mnist {
        dir: PathBuf,
    },
    Synthetic(SyntheticSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Mnist {
            dir: PathBuf::from("data/mnist"),
        }
    }
}

/// How stored exemplars enter training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Exemplars are shuffled together with the task data.
    #[default]
    Union,
    /// The whole memory is appended to every mini-batch of task data.
    EveryBatch,
}

/// Complete description of one incremental-learning run.
///
/// Every field has a default, so a config file only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Label groups, one per task. Defaults to `{0,1},...,{8,9}` for MNIST; the
    /// synthetic generator defines its own grouping and ignores this.
    pub task_groups: Option<Vec<Vec<Label>>>,
    pub method: Method,
    /// Penalty strength; `None` picks the per-method default (see [`default_lambda`]).
    pub lambda: Option<f64>,
    /// Moving-average weight of the current batch Fisher.
    pub alpha: f64,
    /// Optimizer steps per score interval.
    pub delta_t: usize,
    pub epsilon: f64,
    /// Exemplars kept per past class; 0 disables the episodic memory.
    pub samples_per_class: usize,
    pub sampler: Sampler,
    pub replay: ReplayMode,
    pub head_mode: HeadMode,
    /// `None`: 10 for MNIST, 20 for synthetic data.
    pub epochs_per_task: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
    pub fisher_mode: FisherMode,
    pub normalization: Normalization,
    /// Rescale PI scores into [0, 1] before building the anchor.
    pub normalize_pi: bool,
    /// Create output units for every label of the stream before task 1, so the
    /// single-head softmax covers all eventual labels from the start.
    pub preallocate_outputs: bool,
    /// He-uniform scale for output units added at later tasks.
    pub new_head_init_scale: f64,
    /// Feed the full objective gradient (data loss + penalty) into the path
    /// scores; `false` uses the data-loss gradient only.
    pub score_uses_penalty_grad: bool,
    /// Train the jointly-trained reference models needed for intransigence.
    pub compute_reference: bool,
    pub write_checkpoint: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            task_groups: None,
            method: Method::Rwalk,
            lambda: None,
            alpha: 0.9,
            delta_t: 10,
            epsilon: 1e-3,
            samples_per_class: 0,
            sampler: Sampler::Mof,
            replay: ReplayMode::Union,
            head_mode: HeadMode::Multi,
            epochs_per_task: None,
            batch_size: 64,
            seed: 0,
            hidden: vec![256, 256],
            adam: AdamConfig::default(),
            fisher_mode: FisherMode::PerExample,
            normalization: Normalization::Max,
            normalize_pi: false,
            preallocate_outputs: false,
            new_head_init_scale: 1.0,
            score_uses_penalty_grad: true,
            compute_reference: true,
            write_checkpoint: false,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Per-method penalty strengths used for MNIST.
pub fn default_lambda(method: Method) -> f64 {
    match method {
        Method::Vanilla => 0.0,
        Method::Ewcpp => 75_000.0,
        Method::Pi => 0.1,
        Method::Rwalk => 1_000.0,
    }
}

impl ExperimentConfig {
    /// Small, fast configuration on the synthetic generator.
    pub fn synthetic(spec: SyntheticSpec) -> Self {
        Self {
            dataset: DatasetSource::Synthetic(spec),
            hidden: vec![32, 32],
            out_dir: PathBuf::from("runs/synthetic"),
            ..Self::default()
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| default_lambda(self.method))
    }

    pub fn epochs(&self) -> usize {
        self.epochs_per_task.unwrap_or(match self.dataset {
            DatasetSource::Mnist { .. } => 10,
            DatasetSource::Synthetic(_) => 20,
        })
    }

    pub fn anchor_options(&self) -> AnchorOptions {
        AnchorOptions {
            normalization: self.normalization,
            normalize_pi: self.normalize_pi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.delta_t == 0 {
            return bad("delta_t must be >= 1".into());
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        let lambda = self.lambda();
        if !(lambda.is_finite() && lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {lambda}"));
        }
        if self.batch_size == 0 || self.epochs() == 0 {
            return bad("batch_size and epochs_per_task must be >= 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be non-empty and > 0".into());
        }
        if !(self.adam.lr > 0.0
            && (0.0..1.0).contains(&self.adam.beta1)
            && (0.0..1.0).contains(&self.adam.beta2))
        {
            return bad("invalid Adam hyperparameters".into());
        }
        if !(self.new_head_init_scale.is_finite() && self.new_head_init_scale >= 0.0) {
            return bad("new_head_init_scale must be >= 0".into());
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(p, text + "\n").map_err(|e| Error::io(p, e))
    }
}
