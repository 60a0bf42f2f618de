//! Exact and linear-cost cross-attention between the body and hand streams,
//! and the pooling attention module built on per-axis pooled token views.

pub mod kernels;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use kernels::RandomFeatures;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::model::loss::Logits;
use crate::model::params::ParamStore;
use crate::tensor::Tensor;

/// Which kernel a cross-attention block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Exact,
    Fast,
}

fn as_batch(x: &Tensor, what: &str) -> Result<Tensor> {
    ensure!(x.ndim() == 2, "{what} must be a [L, d] matrix, got {:?}", x.shape());
    x.clone().reshape(&[1, x.dim(0), x.dim(1)])
}

fn unbatch(x: Tensor) -> Tensor {
    let (l, d) = (x.dim(1), x.dim(2));
    x.reshape(&[l, d]).expect("same size")
}

/// `softmax(Q Kᵀ / √d) V` for `[L_q, d]`, `[L_k, d]`, `[L_k, d_v]` operands.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (out, _) = kernels::softmax_forward(&as_batch(q, "Q")?, &as_batch(k, "K")?, &as_batch(v, "V")?)?;
    Ok(unbatch(out))
}

/// Positive-random-feature attention with `m` Gaussian features drawn from `seed`.
pub fn fast_attention(q: &Tensor, k: &Tensor, v: &Tensor, m: usize, seed: u64) -> Result<Tensor> {
    ensure!(m >= 1, "fast attention needs m >= 1 random features");
    ensure!(q.ndim() == 2, "Q must be a [L, d] matrix, got {:?}", q.shape());
    let feats = RandomFeatures::draw(q.dim(1), m, seed);
    fast_attention_with(q, k, v, &feats)
}

/// Fast attention with an explicit, frozen feature draw.
pub fn fast_attention_with(q: &Tensor, k: &Tensor, v: &Tensor, feats: &RandomFeatures) -> Result<Tensor> {
    let (out, _) = kernels::fast_forward(&as_batch(q, "Q")?, &as_batch(k, "K")?, &as_batch(v, "V")?, feats)?;
    Ok(unbatch(out))
}

/// One attention direction: projections `[C, d]` for query/key/value, output
/// projection `[d, C]`, and (for fast attention) the frozen feature draw.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
    pub features: Option<RandomFeatures>,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, dim: usize, kind: AttentionKind, m: usize, rng: &mut R) -> Self {
        let b_in = 1.0 / (channels as f64).sqrt();
        let b_out = 1.0 / (dim as f64).sqrt();
        let query = Tensor::uniform(&[channels, dim], b_in, rng);
        let key = Tensor::uniform(&[channels, dim], b_in, rng);
        let value = Tensor::uniform(&[channels, dim], b_in, rng);
        let output = Tensor::uniform(&[dim, channels], b_out, rng);
        let features = match kind {
            AttentionKind::Exact => None,
            AttentionKind::Fast => Some(RandomFeatures::draw(dim, m, rng.random())),
        };
        AttentionParams { query, key, value, output, features }
    }

    pub fn kind(&self) -> AttentionKind {
        if self.features.is_some() {
            AttentionKind::Fast
        } else {
            AttentionKind::Exact
        }
    }

    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        store.insert_param(&format!("{prefix}.q"), self.query.clone());
        store.insert_param(&format!("{prefix}.k"), self.key.clone());
        store.insert_param(&format!("{prefix}.v"), self.value.clone());
        store.insert_param(&format!("{prefix}.o"), self.output.clone());
        if let Some(f) = &self.features {
            store.insert_buffer(&format!("{prefix}.features"), f.tensor().clone());
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let features = match store.buffer(&format!("{prefix}.features")) {
            Some(t) => Some(RandomFeatures::from_tensor(t.clone())?),
            None => None,
        };
        Ok(AttentionParams {
            query: store.get(&format!("{prefix}.q"))?.clone(),
            key: store.get(&format!("{prefix}.k"))?.clone(),
            value: store.get(&format!("{prefix}.v"))?.clone(),
            output: store.get(&format!("{prefix}.o"))?.clone(),
            features,
        })
    }
}

/// Tape handles for one attention direction.
pub(crate) struct AttentionVars {
    q: Var,
    k: Var,
    v: Var,
    o: Var,
    features: Option<Arc<RandomFeatures>>,
}

impl AttentionVars {
    pub(crate) fn from_store(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let features = match store.buffer(&format!("{prefix}.features")) {
            Some(t) => Some(Arc::new(RandomFeatures::from_tensor(t.clone())?)),
            None => None,
        };
        Ok(AttentionVars {
            q: store.bind(tape, &format!("{prefix}.q"))?,
            k: store.bind(tape, &format!("{prefix}.k"))?,
            v: store.bind(tape, &format!("{prefix}.v"))?,
            o: store.bind(tape, &format!("{prefix}.o"))?,
            features,
        })
    }

    fn from_params(tape: &mut Tape, p: &AttentionParams) -> Self {
        AttentionVars {
            q: tape.leaf(p.query.clone()),
            k: tape.leaf(p.key.clone()),
            v: tape.leaf(p.value.clone()),
            o: tape.leaf(p.output.clone()),
            features: p.features.clone().map(Arc::new),
        }
    }
}

/// `OutProj(attn(QProj(queries), KProj(context), VProj(context)))` over
/// `[N, L, C]` token tensors; no residual path.
pub(crate) fn attend(tape: &mut Tape, queries: Var, context: Var, p: &AttentionVars) -> Result<Var> {
    let q = tape.linear(queries, p.q, None)?;
    let k = tape.linear(context, p.k, None)?;
    let v = tape.linear(context, p.v, None)?;
    let mixed = match &p.features {
        Some(f) => tape.fast_attention(q, k, v, f)?,
        None => tape.softmax_attention(q, k, v)?,
    };
    tape.linear(mixed, p.o, None)
}

/// Both directions of body/hand cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionParams {
    pub to_body: AttentionParams,
    pub to_hand: AttentionParams,
}

impl CrossAttentionParams {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(CrossAttentionParams {
            to_body: AttentionParams::from_store(store, &format!("{prefix}.to_body"))?,
            to_hand: AttentionParams::from_store(store, &format!("{prefix}.to_hand"))?,
        })
    }
}

/// Bidirectional cross-attention: body tokens query the hand stream and vice
/// versa. Inputs are `[N, L_B, C]` and `[N, L_H, C]`.
pub fn cross_attend(body: &Tensor, hand: &Tensor, params: &CrossAttentionParams) -> Result<(Tensor, Tensor)> {
    ensure!(
        body.ndim() == 3 && hand.ndim() == 3 && body.dim(0) == hand.dim(0) && body.dim(2) == hand.dim(2),
        "cross_attend: token tensors {:?} and {:?} must be [N, L, C] with shared N and C",
        body.shape(),
        hand.shape()
    );
    let mut tape = Tape::new();
    let b = tape.leaf(body.clone());
    let h = tape.leaf(hand.clone());
    let to_body = AttentionVars::from_params(&mut tape, &params.to_body);
    let to_hand = AttentionVars::from_params(&mut tape, &params.to_hand);
    let fb = attend(&mut tape, b, h, &to_body)?;
    let fh = attend(&mut tape, h, b, &to_hand)?;
    Ok((tape.value(fb).clone(), tape.value(fh).clone()))
}

/// The three pooled axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    T,
    V,
    I,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::T, Axis::V, Axis::I];

    /// Feature-map axes averaged away to form this view.
    fn pooled(self) -> [usize; 2] {
        match self {
            Axis::T => [3, 4],
            Axis::V => [2, 3],
            Axis::I => [2, 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::T => "t",
            Axis::V => "v",
            Axis::I => "i",
        }
    }
}

/// Tokens `[N, L_α, C]` along one axis of a `[N, C, T, I, V]` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisView {
    pub tokens: Tensor,
    pub axis: Axis,
}

/// Average the feature map over the two non-channel axes other than `α`, for
/// each `α ∈ {T, V, I}`.
pub fn pooled_axis_views(f: &Tensor) -> Result<[AxisView; 3]> {
    ensure!(f.ndim() == 5, "pooled_axis_views: expected [N, C, T, I, V], got {:?}", f.shape());
    Ok(Axis::ALL.map(|axis| AxisView { tokens: f.mean_axes(&axis.pooled()).permute(&[0, 2, 1]), axis }))
}

pub(crate) fn pooled_view_on_tape(tape: &mut Tape, f: Var, axis: Axis) -> Var {
    let pooled = tape.mean(f, &axis.pooled());
    tape.permute(pooled, &[0, 2, 1])
}

/// Flatten `[N, C, T, I, V]` into `[N, T·I·V, C]` tokens.
pub(crate) fn flatten_tokens(tape: &mut Tape, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    let r = tape.reshape(f, &[s[0], s[1], s[2] * s[3] * s[4]])?;
    Ok(tape.permute(r, &[0, 2, 1]))
}

/// Pooling attention module parameters: one cross-attention pair per axis and
/// a classifier per stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PamParams {
    pub axes: [CrossAttentionParams; 3],
    pub body_fc: (Tensor, Tensor),
    pub hand_fc: (Tensor, Tensor),
}

impl PamParams {
    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        for (axis, p) in Axis::ALL.iter().zip(&self.axes) {
            p.to_body.insert_into(store, &format!("{prefix}.{}.to_body", axis.name()));
            p.to_hand.insert_into(store, &format!("{prefix}.{}.to_hand", axis.name()));
        }
        store.insert_param("body.fc.W", self.body_fc.0.clone());
        store.insert_param("body.fc.b", self.body_fc.1.clone());
        store.insert_param("hand.fc.W", self.hand_fc.0.clone());
        store.insert_param("hand.fc.b", self.hand_fc.1.clone());
    }

    /// Reads the layout written by `insert_into`.
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let axes = [Axis::T, Axis::V, Axis::I].map(|a| CrossAttentionParams::from_store(store, &format!("{prefix}.{}", a.name())));
        let [t, v, i] = axes;
        Ok(PamParams {
            axes: [t?, v?, i?],
            body_fc: (store.get("body.fc.W")?.clone(), store.get("body.fc.b")?.clone()),
            hand_fc: (store.get("hand.fc.W")?.clone(), store.get("hand.fc.b")?.clone()),
        })
    }
}

/// Tape version of the pooling attention module; names are resolved under
/// `prefix` (attention) and `body.fc` / `hand.fc` (classifiers) in `store`.
pub(crate) fn pam_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    fb: Var,
    fh: Var,
) -> Result<(Var, Var)> {
    let mut body_sum: Option<Var> = None;
    let mut hand_sum: Option<Var> = None;
    for axis in Axis::ALL {
        let vb = pooled_view_on_tape(tape, fb, axis);
        let vh = pooled_view_on_tape(tape, fh, axis);
        let to_body = AttentionVars::from_store(tape, store, &format!("{prefix}.{}.to_body", axis.name()))?;
        let to_hand = AttentionVars::from_store(tape, store, &format!("{prefix}.{}.to_hand", axis.name()))?;
        let ab = attend(tape, vb, vh, &to_body)?;
        let ah = attend(tape, vh, vb, &to_hand)?;
        let pb = tape.mean(ab, &[1]);
        let ph = tape.mean(ah, &[1]);
        body_sum = Some(match body_sum {
            Some(s) => tape.add(s, pb)?,
            None => pb,
        });
        hand_sum = Some(match hand_sum {
            Some(s) => tape.add(s, ph)?,
            None => ph,
        });
    }
    let (wb, bb) = (store.bind(tape, "body.fc.W")?, store.bind(tape, "body.fc.b")?);
    let (wh, bh) = (store.bind(tape, "hand.fc.W")?, store.bind(tape, "hand.fc.b")?);
    let yb = tape.linear(body_sum.expect("three axes"), wb, Some(bb))?;
    let yh = tape.linear(hand_sum.expect("three axes"), wh, Some(bh))?;
    Ok((yb, yh))
}

/// Pooling attention module on two `[N, C, T, I, V]` feature maps.
pub fn pam_forward(body: &Tensor, hand: &Tensor, params: &PamParams) -> Result<(Logits, Logits)> {
    ensure!(
        body.ndim() == 5 && hand.ndim() == 5 && body.dim(1) == hand.dim(1) && body.dim(0) == hand.dim(0),
        "pam_forward: feature maps {:?} and {:?} must share N and C",
        body.shape(),
        hand.shape()
    );
    let mut store = ParamStore::default();
    params.insert_into(&mut store, "pam");
    let mut tape = Tape::new();
    let fb = tape.leaf(body.clone());
    let fh = tape.leaf(hand.clone());
    let (yb, yh) = pam_on_tape(&mut tape, &store, "pam", fb, fh)?;
    Ok((Logits::new(tape.value(yb).clone())?, Logits::new(tape.value(yh).clone())?))
}
