use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::LossWeights;
use super::network::{Model, ModelConfig, Variant};
use super::params::ParamStore;
use crate::data::Modality;
use crate::error::{ensure, Error, Result};

pub const CHECKPOINT_VERSION: u64 = 1;

/// Trained models for one or more modalities. Every tensor lives in the flat
/// `parameters` / `buffers` maps under `{modality}.` (e.g.
/// `joint.body.block2.spatial.W`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u64,
    pub variant: Variant,
    pub config: ModelConfig,
    pub loss_weights: LossWeights,
    pub streams: Vec<Modality>,
    #[serde(flatten)]
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(models: &[(Modality, &Model)], loss_weights: LossWeights) -> Result<Checkpoint> {
        ensure!(!models.is_empty(), "checkpoint needs at least one stream");
        let config = models[0].1.config().clone();
        let mut store = ParamStore::default();
        let mut streams = Vec::new();
        for (modality, model) in models {
            ensure!(model.config() == &config, "all streams in a checkpoint must share one config");
            ensure!(!streams.contains(modality), "stream {} appears twice", modality.name());
            store.absorb(model.store().clone(), modality.name());
            streams.push(*modality);
        }
        Ok(Checkpoint { format_version: CHECKPOINT_VERSION, variant: config.variant, config, loss_weights, streams, store })
    }

    pub fn model(&self, modality: Modality) -> Result<Model> {
        ensure!(
            self.streams.contains(&modality),
            "checkpoint has no {} stream (available: {})",
            modality.name(),
            self.streams.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
        );
        Model::from_store(self.config.clone(), self.store.scoped(modality.name()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(self.format_version));
        }
        ensure!(
            self.variant == self.config.variant,
            "checkpoint variant {} disagrees with its config ({})",
            self.variant.name(),
            self.config.variant.name()
        );
        self.loss_weights.validate()?;
        for &m in &self.streams {
            self.model(m)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Checkpoint> {
        let c: Checkpoint = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io_at(path, e))?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let c: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path).map_err(|e| Error::io_at(path, e))?))?;
        c.validate()?;
        Ok(c)
    }
}
