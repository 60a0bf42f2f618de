//! Model variants over one coordinate modality.
//!
//! Parameter paths (one modality):
//! `body.blockB.*` / `hand.blockB.*` backbones, `body.fc.*` / `hand.fc.*`
//! stream classifiers, `xattn.to_body.*` / `xattn.to_hand.*` flattened-token
//! cross-attention, `pam.{t,v,i}.to_{body,hand}.*` pooling attention, and
//! `branch{1..4}.fc.*` for the four-branch model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{weighted_ce, BranchOutputs, Logits, LossWeights};
use super::params::ParamStore;
use crate::attention::{attend, flatten_tokens, pam_on_tape, AttentionKind, AttentionParams, AttentionVars};
use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::graph::adjacency::{normalize_adjacency, AdjacencyStack, Partition};
use crate::graph::backbone::{backbone_on_tape, init_backbone, BackboneConfig, Mode};
use crate::graph::topology::{GraphTopology, LayoutKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Independent streams, averaged logits.
    ScoreFusion,
    /// Exact cross-attention over flattened tokens.
    StandardXattn,
    /// Random-feature cross-attention over flattened tokens.
    FastXattn,
    /// Random-feature cross-attention over pooled axis views.
    Pam,
    /// Two expertized and two interactive branches, summed logits.
    Expertized,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::ScoreFusion, Variant::StandardXattn, Variant::FastXattn, Variant::Pam, Variant::Expertized];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ScoreFusion => "score_fusion",
            Variant::StandardXattn => "standard_xattn",
            Variant::FastXattn => "fast_xattn",
            Variant::Pam => "pam",
            Variant::Expertized => "expertized",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| crate::Error::validation(format!("unknown variant '{s}'")))
    }
}

/// Node layout used by both streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GraphLayout {
    /// 25-node body tree and padded 21-node hand.
    Standard,
    /// A path graph of the given size for both streams (tiny test models).
    Path { nodes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub frames: usize,
    pub backbone: BackboneConfig,
    pub partition: Partition,
    /// Attention projection width; `None` uses the backbone output width.
    pub attention_dim: Option<usize>,
    pub random_features: usize,
    pub layout: GraphLayout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Pam,
            num_classes: 12,
            frames: 32,
            backbone: BackboneConfig::default(),
            partition: Partition::Distance,
            attention_dim: None,
            random_features: 64,
            layout: GraphLayout::Standard,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        ensure!(self.num_classes >= 2, "num_classes must be at least 2");
        ensure!(self.frames >= 2, "frames must be at least 2");
        ensure!(self.random_features >= 1, "random_features must be positive");
        ensure!(self.attention_dim != Some(0), "attention_dim must be positive");
        if let GraphLayout::Path { nodes } = self.layout {
            ensure!(nodes >= 1, "path layout needs at least one node");
        }
        Ok(())
    }

    pub fn attention_width(&self) -> usize {
        self.attention_dim.unwrap_or_else(|| self.backbone.out_channels())
    }

    pub fn topologies(&self) -> (GraphTopology, GraphTopology) {
        match self.layout {
            GraphLayout::Standard => {
                (GraphTopology::build(LayoutKind::Body25), GraphTopology::build(LayoutKind::Hand21Padded25))
            }
            GraphLayout::Path { nodes } => (GraphTopology::path(nodes), GraphTopology::path(nodes)),
        }
    }

    pub fn nodes(&self) -> usize {
        match self.layout {
            GraphLayout::Standard => 25,
            GraphLayout::Path { nodes } => nodes,
        }
    }

    pub fn subsets(&self) -> usize {
        match self.partition {
            Partition::Uniform => 1,
            Partition::Distance => 3,
        }
    }
}

/// Logits produced by a variant.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelOutput {
    Dual { body: Logits, hand: Logits },
    Branches(BranchOutputs),
}

impl ModelOutput {
    /// Averaged pair for dual-stream variants, four-branch sum otherwise.
    pub fn fused(&self) -> Result<Logits> {
        match self {
            ModelOutput::Dual { body, hand } => super::loss::fuse_logits_avg(&[body, hand]),
            ModelOutput::Branches(b) => Ok(b.fused.clone()),
        }
    }

    /// Body-only logits (the expertized body branch for the four-branch model).
    pub fn body(&self) -> &Logits {
        match self {
            ModelOutput::Dual { body, .. } => body,
            ModelOutput::Branches(b) => &b.expert_body,
        }
    }

    pub fn hand(&self) -> &Logits {
        match self {
            ModelOutput::Dual { hand, .. } => hand,
            ModelOutput::Branches(b) => &b.expert_hand,
        }
    }

    pub fn loss(&self, labels: &[usize], w: &LossWeights) -> Result<f64> {
        match self {
            ModelOutput::Dual { body, hand } => super::loss::dual_stream_loss(body, hand, labels, w),
            ModelOutput::Branches(b) => super::loss::bharnet_e_loss(b, labels, w),
        }
    }
}

/// Tape handles mirroring [`ModelOutput`].
#[derive(Debug, Clone, Copy)]
pub enum TapeOutput {
    Dual { body: Var, hand: Var },
    Branches([Var; 4]),
}

impl TapeOutput {
    pub fn loss(&self, tape: &mut Tape, labels: &[usize], w: &LossWeights) -> Result<Var> {
        w.validate()?;
        match *self {
            TapeOutput::Dual { body, hand } => {
                let sum = tape.add(body, hand)?;
                let fused = tape.scale(sum, 0.5);
                weighted_ce(tape, &[(w.lambda_body, body), (w.lambda_hand, hand), (w.lambda_cpl, fused)], labels)
            }
            TapeOutput::Branches(y) => {
                let s12 = tape.add(y[0], y[1])?;
                let s123 = tape.add(s12, y[2])?;
                let fused = tape.add(s123, y[3])?;
                weighted_ce(tape, &[(w.lambda_body, y[2]), (w.lambda_hand, y[3]), (w.lambda_cpl, fused)], labels)
            }
        }
    }

    pub fn read(&self, tape: &Tape) -> Result<ModelOutput> {
        let l = |v: Var| Logits::new(tape.value(v).clone());
        Ok(match *self {
            TapeOutput::Dual { body, hand } => ModelOutput::Dual { body: l(body)?, hand: l(hand)? },
            TapeOutput::Branches(y) => {
                ModelOutput::Branches(BranchOutputs::from_branches(l(y[0])?, l(y[1])?, l(y[2])?, l(y[3])?)?)
            }
        })
    }
}

/// One modality's network: configuration, parameters, and adjacency.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    body_adj: Arc<AdjacencyStack>,
    hand_adj: Arc<AdjacencyStack>,
}

fn insert_fc<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, k: usize, rng: &mut R) {
    let bound = 1.0 / (c as f64).sqrt();
    store.insert_param(&format!("{prefix}.W"), Tensor::uniform(&[c, k], bound, rng));
    store.insert_param(&format!("{prefix}.b"), Tensor::zeros(&[k]));
}

fn insert_cross<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, kind: AttentionKind, rng: &mut R) {
    let (c, d, m) = (cfg.backbone.out_channels(), cfg.attention_width(), cfg.random_features);
    AttentionParams::init(c, d, kind, m, rng).insert_into(store, &format!("{prefix}.to_body"));
    AttentionParams::init(c, d, kind, m, rng).insert_into(store, &format!("{prefix}.to_hand"));
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let s = config.subsets();
        init_backbone(&mut store, "body", &config.backbone, s, &mut rng);
        init_backbone(&mut store, "hand", &config.backbone, s, &mut rng);
        let (c, k) = (config.backbone.out_channels(), config.num_classes);
        match config.variant {
            Variant::ScoreFusion => {}
            Variant::StandardXattn => insert_cross(&mut store, "xattn", &config, AttentionKind::Exact, &mut rng),
            Variant::FastXattn | Variant::Expertized => {
                insert_cross(&mut store, "xattn", &config, AttentionKind::Fast, &mut rng)
            }
            Variant::Pam => {
                for axis in ["t", "v", "i"] {
                    insert_cross(&mut store, &format!("pam.{axis}"), &config, AttentionKind::Fast, &mut rng);
                }
            }
        }
        if config.variant == Variant::Expertized {
            for b in 1..=4 {
                insert_fc(&mut store, &format!("branch{b}.fc"), c, k, &mut rng);
            }
        } else {
            insert_fc(&mut store, "body.fc", c, k, &mut rng);
            insert_fc(&mut store, "hand.fc", c, k, &mut rng);
        }
        Model::from_store(config, store)
    }

    /// Wrap an existing parameter store; every parameter the variant needs
    /// must be present.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Model> {
        config.validate()?;
        let (bt, ht) = config.topologies();
        let body_adj = Arc::new(normalize_adjacency(&bt, config.partition));
        let hand_adj = Arc::new(normalize_adjacency(&ht, config.partition));
        let model = Model { config, store, body_adj, hand_adj };
        let probe = model.probe_input(1);
        let mut tape = Tape::new();
        let xb = tape.leaf(probe.clone());
        let xh = tape.leaf(probe);
        model.forward_on_tape(&mut tape, xb, xh, Mode::Eval)?;
        Ok(model)
    }

    /// Same config and adjacency around another store, without validation.
    pub(crate) fn with_store(&self, store: ParamStore) -> Model {
        Model { config: self.config.clone(), store, body_adj: self.body_adj.clone(), hand_adj: self.hand_adj.clone() }
    }

    fn probe_input(&self, n: usize) -> Tensor {
        Tensor::zeros(&[n, self.config.backbone.channels[0], self.config.frames, 2, self.config.nodes()])
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn adjacency(&self) -> (&Arc<AdjacencyStack>, &Arc<AdjacencyStack>) {
        (&self.body_adj, &self.hand_adj)
    }

    fn classify(&self, tape: &mut Tape, features: Var, prefix: &str) -> Result<Var> {
        let pooled = tape.mean(features, &[2, 3, 4]);
        let w = self.store.bind(tape, &format!("{prefix}.W"))?;
        let b = self.store.bind(tape, &format!("{prefix}.b"))?;
        tape.linear(pooled, w, Some(b))
    }

    fn classify_tokens(&self, tape: &mut Tape, tokens: Var, prefix: &str) -> Result<Var> {
        let pooled = tape.mean(tokens, &[1]);
        let w = self.store.bind(tape, &format!("{prefix}.W"))?;
        let b = self.store.bind(tape, &format!("{prefix}.b"))?;
        tape.linear(pooled, w, Some(b))
    }

    fn cross_on_tape(&self, tape: &mut Tape, fb: Var, fh: Var) -> Result<(Var, Var)> {
        let tb = flatten_tokens(tape, fb)?;
        let th = flatten_tokens(tape, fh)?;
        let to_body = AttentionVars::from_store(tape, &self.store, "xattn.to_body")?;
        let to_hand = AttentionVars::from_store(tape, &self.store, "xattn.to_hand")?;
        let ab = attend(tape, tb, th, &to_body)?;
        let ah = attend(tape, th, tb, &to_hand)?;
        Ok((ab, ah))
    }

    /// Body and hand backbone features.
    pub fn features_on_tape(&self, tape: &mut Tape, xb: Var, xh: Var, mode: Mode) -> Result<(Var, Var)> {
        let fb = backbone_on_tape(tape, &self.store, "body", &self.config.backbone, &self.body_adj, xb, mode)?;
        let fh = backbone_on_tape(tape, &self.store, "hand", &self.config.backbone, &self.hand_adj, xh, mode)?;
        Ok((fb, fh))
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, xb: Var, xh: Var, mode: Mode) -> Result<TapeOutput> {
        ensure!(
            tape.shape(xb)[0] == tape.shape(xh)[0],
            "body and hand batches differ: {} vs {}",
            tape.shape(xb)[0],
            tape.shape(xh)[0]
        );
        let (fb, fh) = self.features_on_tape(tape, xb, xh, mode)?;
        Ok(match self.config.variant {
            Variant::ScoreFusion => {
                TapeOutput::Dual { body: self.classify(tape, fb, "body.fc")?, hand: self.classify(tape, fh, "hand.fc")? }
            }
            Variant::StandardXattn | Variant::FastXattn => {
                let (ab, ah) = self.cross_on_tape(tape, fb, fh)?;
                TapeOutput::Dual {
                    body: self.classify_tokens(tape, ab, "body.fc")?,
                    hand: self.classify_tokens(tape, ah, "hand.fc")?,
                }
            }
            Variant::Pam => {
                let (body, hand) = pam_on_tape(tape, &self.store, "pam", fb, fh)?;
                TapeOutput::Dual { body, hand }
            }
            Variant::Expertized => {
                let y1 = self.classify(tape, fb, "branch1.fc")?;
                let y2 = self.classify(tape, fh, "branch2.fc")?;
                let (ab, ah) = self.cross_on_tape(tape, fb, fh)?;
                let y3 = self.classify_tokens(tape, ab, "branch3.fc")?;
                let y4 = self.classify_tokens(tape, ah, "branch4.fc")?;
                TapeOutput::Branches([y1, y2, y3, y4])
            }
        })
    }

    /// Inference on `[N, 3, T, 2, V]` body and hand inputs, in chunks of
    /// `chunk` samples (normalization uses running statistics).
    pub fn predict(&self, xb: &Tensor, xh: &Tensor, chunk: usize) -> Result<ModelOutput> {
        ensure!(xb.ndim() == 5 && xh.ndim() == 5, "inputs must be [N, C, T, I, V]");
        let n = xb.dim(0);
        ensure!(xh.dim(0) == n, "body and hand batches differ: {} vs {}", n, xh.dim(0));
        let chunk = chunk.max(1);
        let starts: Vec<usize> = (0..n).step_by(chunk).collect();
        let parts = crate::exec::map_slice(&starts, |&s| -> Result<ModelOutput> {
            let e = (s + chunk).min(n);
            let mut tape = Tape::new();
            let b = tape.leaf(slice_batch(xb, s, e));
            let h = tape.leaf(slice_batch(xh, s, e));
            let out = self.forward_on_tape(&mut tape, b, h, Mode::Eval)?;
            out.read(&tape)
        });
        let mut parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            return Ok(parts.pop().expect("one part"));
        }
        concat_outputs(parts)
    }

    /// Forward with an explicit normalization mode, without chunking.
    pub fn forward(&self, xb: &Tensor, xh: &Tensor, mode: Mode) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let b = tape.leaf(xb.clone());
        let h = tape.leaf(xh.clone());
        self.forward_on_tape(&mut tape, b, h, mode)?.read(&tape)
    }

    /// Copy stream weights from a trained score-fusion model (the expert
    /// phase) into this model. Returns the number of copied tensors.
    pub fn load_experts(&mut self, experts: &Model) -> Result<usize> {
        let src = experts.store();
        let mut copied = self.store.copy_prefix(src, "body", "body");
        copied += self.store.copy_prefix(src, "hand", "hand");
        if self.config.variant == Variant::Expertized {
            for (from, to) in [("body.fc", "branch1.fc"), ("hand.fc", "branch2.fc"), ("body.fc", "branch3.fc"), ("hand.fc", "branch4.fc")] {
                copied += self.store.copy_prefix(src, from, to);
            }
            self.store.remove_prefix("body.fc");
            self.store.remove_prefix("hand.fc");
        }
        Model::from_store(self.config.clone(), self.store.clone())?;
        Ok(copied)
    }
}

pub(crate) fn slice_batch(x: &Tensor, start: usize, end: usize) -> Tensor {
    let per = x.len() / x.dim(0).max(1);
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(&shape, x.data()[start * per..end * per].to_vec()).expect("slice of a batch")
}

fn concat_logits(parts: &[&Logits]) -> Result<Logits> {
    let k = parts[0].classes();
    let mut data = Vec::new();
    for p in parts {
        data.extend_from_slice(p.tensor().data());
    }
    let n = data.len() / k;
    Logits::new(Tensor::new(&[n, k], data)?)
}

fn concat_outputs(parts: Vec<ModelOutput>) -> Result<ModelOutput> {
    match &parts[0] {
        ModelOutput::Dual { .. } => {
            let body: Vec<&Logits> = parts.iter().map(ModelOutput::body).collect();
            let hand: Vec<&Logits> = parts.iter().map(ModelOutput::hand).collect();
            Ok(ModelOutput::Dual { body: concat_logits(&body)?, hand: concat_logits(&hand)? })
        }
        ModelOutput::Branches(_) => {
            let pick = |f: fn(&BranchOutputs) -> &Logits| -> Result<Logits> {
                let v: Vec<&Logits> = parts
                    .iter()
                    .map(|p| match p {
                        ModelOutput::Branches(b) => f(b),
                        ModelOutput::Dual { body, .. } => body,
                    })
                    .collect();
                concat_logits(&v)
            };
            Ok(ModelOutput::Branches(BranchOutputs::from_branches(
                pick(|b| &b.expert_body)?,
                pick(|b| &b.expert_hand)?,
                pick(|b| &b.interactive_body)?,
                pick(|b| &b.interactive_hand)?,
            )?))
        }
    }
}
