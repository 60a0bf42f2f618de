//! Experiment harness: run configuration, training, evaluation, cost
//! accounting, and gradient checks.

pub mod cost;
pub mod gradcheck;
pub mod metrics;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, synth_generate, Dataset, Modality, SynthSpec};
use crate::error::{ensure, Result};
use crate::model::{LossWeights, ModelConfig};

pub use cost::{count_cost, count_run_cost, CostBuilder, CostReport, Inference};
pub use gradcheck::{grad_check, GradCheckReport, TARGETS};
pub use metrics::{confusion_matrix, ensemble_streams, Metrics, StreamScore};
pub use train::{evaluate, train, EpochRecord, Phase, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synth {
        #[serde(default)]
        spec: SynthSpec,
        #[serde(default = "default_data_seed")]
        seed: u64,
    },
    Files {
        train: PathBuf,
        test: PathBuf,
    },
}

fn default_data_seed() -> u64 {
    7
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth { spec: SynthSpec::default(), seed: default_data_seed() }
    }
}

impl DataSource {
    /// Train and test sets.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synth { spec, seed } => {
                let split = synth_generate(spec, *seed)?;
                Ok((split.train, split.test))
            }
            DataSource::Files { train, test } => Ok((load_dataset(train)?, load_dataset(test)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataSource,
    pub seed: u64,
    /// Joint fine-tuning epochs (or all epochs on a cold start).
    pub epochs: usize,
    /// Epochs for the per-stream expert phase.
    pub expert_epochs: usize,
    /// Skip the expert phase and train the variant from scratch.
    pub cold_start: bool,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub streams: Vec<Modality>,
    /// Evaluate on the test set after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            data: DataSource::default(),
            seed: 0,
            epochs: 30,
            expert_epochs: 30,
            cold_start: false,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            loss_weights: LossWeights::default(),
            streams: vec![Modality::Joint],
            eval_each_epoch: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_weights.validate()?;
        ensure!(self.batch_size >= 1, "batch_size must be positive");
        ensure!(self.epochs >= 1 || !self.cold_start, "epochs must be positive");
        ensure!(self.epochs + self.expert_epochs >= 1, "nothing to train: zero epochs");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be positive"
        );
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be non-negative");
        ensure!(!self.streams.is_empty(), "at least one stream (joint, bone) is required");
        let mut s = self.streams.clone();
        s.sort();
        s.dedup();
        ensure!(s.len() == self.streams.len(), "streams must not repeat");
        if let DataSource::Synth { spec, .. } = &self.data {
            spec.validate()?;
            ensure!(
                spec.num_classes == self.model.num_classes,
                "synthetic spec has {} classes but the model has {}",
                spec.num_classes,
                self.model.num_classes
            );
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<RunConfig> {
        let c: RunConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| crate::Error::io_at(path, e))?)
    }
}
