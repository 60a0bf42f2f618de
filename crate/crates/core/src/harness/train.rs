use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{ensemble_streams, Metrics, StreamScore};
use super::RunConfig;
use crate::autodiff::Tape;
use crate::data::{to_stream_tensor, Dataset, Modality, StreamKind, StreamTensor};
use crate::error::{ensure, Error, Result};
use crate::graph::backbone::Mode;
use crate::graph::norm::update_running;
use crate::model::{Checkpoint, LossWeights, Model, ModelConfig, ModelOutput, Variant};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Expert,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stream: Modality,
    pub phase: Phase,
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Metrics,
    pub history: Vec<EpochRecord>,
}

/// Body and hand inputs for one modality.
#[derive(Debug, Clone)]
pub struct StreamPair {
    pub body: StreamTensor,
    pub hand: StreamTensor,
    pub labels: Vec<usize>,
}

pub fn prepare(dataset: &Dataset, modality: Modality, config: &ModelConfig) -> Result<StreamPair> {
    ensure!(
        dataset.num_classes == config.num_classes,
        "dataset has {} classes but the model has {}",
        dataset.num_classes,
        config.num_classes
    );
    let (bt, ht) = config.topologies();
    let (body, labels) = to_stream_tensor(dataset, StreamKind::body(modality), config.frames, &bt)?;
    let (hand, _) = to_stream_tensor(dataset, StreamKind::hand(modality), config.frames, &ht)?;
    Ok(StreamPair { body, hand, labels })
}

/// Step size for `epoch` with ×0.1 decays at 60% and 80% of `total`.
pub fn learning_rate_at(base: f64, epoch: usize, total: usize) -> f64 {
    let milestones = [total * 6 / 10, total * 8 / 10];
    let drops = milestones.iter().filter(|&&m| m > 0 && epoch >= m).count();
    base * 0.1f64.powi(drops as i32)
}

struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    fn new(config: &RunConfig) -> Self {
        Sgd { momentum: config.momentum, weight_decay: config.weight_decay, velocity: BTreeMap::new() }
    }

    fn step(&mut self, model: &mut Model, grads: BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let param = model
                .store_mut()
                .get_mut(&name)
                .ok_or_else(|| Error::validation(format!("gradient for unknown parameter {name}")))?;
            let decay = if param.ndim() >= 2 { self.weight_decay } else { 0.0 };
            let v = self.velocity.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(param.data_mut()) {
                *vi = self.momentum * *vi + gi + decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

fn stream_seed(seed: u64, modality: Modality) -> u64 {
    seed.wrapping_mul(2).wrapping_add(match modality {
        Modality::Joint => 0,
        Modality::Bone => 1,
    })
}

struct Fit<'a> {
    config: &'a RunConfig,
    modality: Modality,
    train: &'a StreamPair,
    test: Option<&'a StreamPair>,
    history: &'a mut Vec<EpochRecord>,
}

impl Fit<'_> {
    fn run(&mut self, model: &mut Model, weights: &LossWeights, epochs: usize, phase: Phase) -> Result<()> {
        let n = self.train.labels.len();
        ensure!(n > 0, "training set is empty");
        let mut opt = Sgd::new(self.config);
        let seed = stream_seed(self.config.seed, self.modality);
        for epoch in 0..epochs {
            let lr = learning_rate_at(self.config.learning_rate, epoch, epochs);
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((phase == Phase::Joint) as u64) << 32 | epoch as u64);
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (batch, idx) in order.chunks(self.config.batch_size).enumerate() {
                let labels: Vec<usize> = idx.iter().map(|&i| self.train.labels[i]).collect();
                let mut tape = Tape::new();
                let xb = tape.leaf(self.train.body.select(idx).data);
                let xh = tape.leaf(self.train.hand.select(idx).data);
                let out = model.forward_on_tape(&mut tape, xb, xh, Mode::Train)?;
                let loss = out.loss(&mut tape, &labels, weights)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch, value });
                }
                let grads = tape.backward(loss);
                opt.step(model, tape.param_grads(&grads), lr)?;
                for s in tape.norm_stats() {
                    let store = model.store_mut();
                    let mut rm = store.require_buffer(&format!("{}.running_mean", s.name))?.clone();
                    let mut rv = store.require_buffer(&format!("{}.running_var", s.name))?.clone();
                    update_running(&mut rm, &mut rv, &s.mean, &s.var, s.count);
                    store.insert_buffer(&format!("{}.running_mean", s.name), rm);
                    store.insert_buffer(&format!("{}.running_var", s.name), rv);
                }
                total += value * idx.len() as f64;
            }
            let test_accuracy = match (self.config.eval_each_epoch, self.test) {
                (true, Some(test)) => {
                    let out = model.predict(&test.body.data, &test.hand.data, EVAL_CHUNK)?;
                    Some(StreamScore::from_logits(&out.fused()?, &test.labels)?.accuracy)
                }
                _ => None,
            };
            self.history.push(EpochRecord {
                stream: self.modality,
                phase,
                epoch,
                learning_rate: lr,
                train_loss: total / n as f64,
                test_accuracy,
            });
        }
        Ok(())
    }

    fn fit(&mut self) -> Result<Model> {
        let cfg = self.config;
        let seed = stream_seed(cfg.seed, self.modality);
        if cfg.cold_start || cfg.expert_epochs == 0 {
            let mut model = Model::init(cfg.model.clone(), seed)?;
            self.run(&mut model, &cfg.loss_weights, cfg.epochs, Phase::Joint)?;
            return Ok(model);
        }
        let expert_cfg = ModelConfig { variant: Variant::ScoreFusion, ..cfg.model.clone() };
        let mut experts = Model::init(expert_cfg, seed)?;
        let unit = LossWeights { lambda_body: 1.0, lambda_hand: 1.0, lambda_cpl: 0.0 };
        self.run(&mut experts, &unit, cfg.expert_epochs, Phase::Expert)?;
        let mut model = Model::init(cfg.model.clone(), seed ^ 0x5eed)?;
        model.load_experts(&experts)?;
        self.run(&mut model, &cfg.loss_weights, cfg.epochs, Phase::Joint)?;
        Ok(model)
    }
}

/// Train one model per requested stream, then evaluate the stream ensemble on
/// the test split.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_set, test_set) = config.data.load()?;
    let mut history = Vec::new();
    let mut models = Vec::new();
    let mut prepared = Vec::new();
    for &modality in &config.streams {
        let tr = prepare(&train_set, modality, &config.model)?;
        let te = prepare(&test_set, modality, &config.model)?;
        let model = Fit { config, modality, train: &tr, test: Some(&te), history: &mut history }.fit()?;
        models.push((modality, model));
        prepared.push(te);
    }
    let refs: Vec<(Modality, &Model)> = models.iter().map(|(m, model)| (*m, model)).collect();
    let checkpoint = Checkpoint::new(&refs, config.loss_weights)?;
    let mut metrics = evaluate_prepared(&refs, &prepared)?;
    metrics.loss_history = history.iter().map(|r| r.train_loss).collect();
    Ok(TrainOutcome { checkpoint, metrics, history })
}

fn evaluate_prepared(models: &[(Modality, &Model)], data: &[StreamPair]) -> Result<Metrics> {
    let mut scores = BTreeMap::new();
    let mut fused = Vec::new();
    for ((modality, model), pair) in models.iter().zip(data) {
        let out = model.predict(&pair.body.data, &pair.hand.data, EVAL_CHUNK)?;
        let name = modality.name();
        let f = out.fused()?;
        scores.insert(name.to_string(), StreamScore::from_logits(&f, &pair.labels)?);
        scores.insert(format!("{name}.body"), StreamScore::from_logits(out.body(), &pair.labels)?);
        scores.insert(format!("{name}.hand"), StreamScore::from_logits(out.hand(), &pair.labels)?);
        if let ModelOutput::Branches(b) = &out {
            let e = crate::model::expert_only_predict(b)?;
            scores.insert(format!("{name}.expert_only"), StreamScore::from_logits(&e, &pair.labels)?);
        }
        fused.push(f);
    }
    let refs: Vec<_> = fused.iter().collect();
    Metrics::from_logits(&ensemble_streams(&refs)?, &data[0].labels, scores)
}

/// Score a checkpoint on `dataset`, ensembling the requested streams.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, streams: &[Modality]) -> Result<Metrics> {
    ensure!(!streams.is_empty(), "at least one stream must be evaluated");
    let mut models = Vec::new();
    let mut data = Vec::new();
    for &m in streams {
        models.push((m, checkpoint.model(m)?));
        data.push(prepare(dataset, m, &checkpoint.config)?);
    }
    let refs: Vec<(Modality, &Model)> = models.iter().map(|(m, model)| (*m, model)).collect();
    evaluate_prepared(&refs, &data)
}
