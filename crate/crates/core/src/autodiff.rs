//! Minimal reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and returns a gradient per recorded value. Operations
//! are coarse (a whole graph convolution or attention block is one node) and
//! each carries a hand-derived backward rule.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::attention::kernels::{self, FastCache, RandomFeatures};
use crate::error::{ensure, Result};
use crate::graph::adjacency::AdjacencyStack;
use crate::graph::{conv, norm};
use crate::model::loss;
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Exp(Var),
    Relu(Var),
    Dot { x: Var, weights: Tensor },
    Linear { x: Var, w: Var, b: Option<Var> },
    GraphConv { x: Var, w: Var, adj: Arc<AdjacencyStack>, agg: Tensor },
    TemporalConv { x: Var, k: Var, stride: usize },
    Norm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, batch: bool },
    Mean { x: Var, axes: Vec<usize> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Softmax { q: Var, k: Var, v: Var, probs: Tensor },
    Fast { q: Var, k: Var, v: Var, feats: Arc<RandomFeatures>, caches: Vec<FastCache> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics observed by a normalization layer during a training pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    norm_stats: Vec<NormStats>,
}

/// Gradients of one scalar with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Record a constant or input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Record a named trainable parameter.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.leaf(value);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn norm_stats(&self) -> &[NormStats] {
        &self.norm_stats
    }

    /// Sign pattern of every rectifier input; a change between two nearby
    /// evaluations marks a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                bits.extend(self.value(x).data().iter().map(|&v| v > 0.0));
            }
        }
        bits
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            "add: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Scalar `Σ x ⊙ weights` for a constant `weights` tensor.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        ensure!(self.shape(x) == weights.shape(), "dot: shape mismatch");
        let s: f64 = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }))
    }

    /// `x W + b` over the last axis of `x`; `W` is `[C_in, C_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        ensure!(
            ws.len() == 2 && xs.last() == Some(&ws[0]),
            "linear: input {:?} incompatible with weights {:?}",
            xs,
            ws
        );
        let (c_in, c_out) = (ws[0], ws[1]);
        let rows = self.value(x).len() / c_in;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = c_out;
        let mut out = vec![0.0; rows * c_out];
        if let Some(b) = b {
            ensure!(self.shape(b) == [c_out], "linear: bias shape {:?} != [{c_out}]", self.shape(b));
            let bias = self.value(b).data();
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(rows, c_in, c_out, 1.0, self.value(x).data(), false, self.value(w).data(), false, 1.0, &mut out);
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn graph_conv(&mut self, x: Var, adj: &Arc<AdjacencyStack>, w: Var) -> Result<Var> {
        let (out, agg) = conv::graph_conv_forward(self.value(x), adj, self.value(w))?;
        Ok(self.push(out, Op::GraphConv { x, w, adj: Arc::clone(adj), agg }))
    }

    pub fn temporal_conv(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let out = conv::temporal_conv(self.value(x), self.value(k), stride)?;
        Ok(self.push(out, Op::TemporalConv { x, k, stride }))
    }

    /// Per-channel normalization. With `running = None` the batch statistics
    /// are used (and recorded under `name`); otherwise the given frozen
    /// `(mean, var)` are applied.
    pub fn norm(
        &mut self,
        name: &str,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor, &Tensor)>,
    ) -> Result<Var> {
        let c = self.shape(x)[1];
        ensure!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            "norm {name}: scale/shift must have {c} entries"
        );
        let batch = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => (m.data().to_vec(), v.data().to_vec()),
            None => norm::batch_stats(self.value(x)),
        };
        let inv_std = norm::inv_std(&var);
        let (out, xhat) = norm::normalize(self.value(x), &mean, &inv_std, self.value(gamma), self.value(beta));
        if batch {
            let count = self.value(x).len() / c;
            self.norm_stats.push(NormStats { name: name.to_string(), mean, var, count });
        }
        Ok(self.push(out, Op::Norm { x, gamma, beta, xhat, inv_std, batch }))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Var {
        let out = self.value(x).mean_axes(axes);
        self.push(out, Op::Mean { x, axes: axes.to_vec() })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = self.value(x).permute(perm);
        self.push(out, Op::Permute { x, perm: perm.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (out, probs) = kernels::softmax_forward(self.value(q), self.value(k), self.value(v))?;
        Ok(self.push(out, Op::Softmax { q, k, v, probs }))
    }

    pub fn fast_attention(&mut self, q: Var, k: Var, v: Var, feats: &Arc<RandomFeatures>) -> Result<Var> {
        let (out, caches) = kernels::fast_forward(self.value(q), self.value(k), self.value(v), feats)?;
        Ok(self.push(out, Op::Fast { q, k, v, feats: Arc::clone(feats), caches }))
    }

    /// Mean cross-entropy of `[N, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (value, probs) = loss::cross_entropy_forward(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(value), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |gi, x| 2.0 * x * gi)),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |gi, y| gi * y)),
                Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })),
                Op::Dot { x, weights } => acc(*x, weights.scale(g.item())),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (c_in, c_out) = (wv.dim(0), wv.dim(1));
                    let rows = xv.len() / c_in;
                    let mut dx = vec![0.0; xv.len()];
                    gemm(rows, c_out, c_in, 1.0, g.data(), false, wv.data(), true, 0.0, &mut dx);
                    let mut dw = vec![0.0; wv.len()];
                    gemm(c_in, rows, c_out, 1.0, xv.data(), true, g.data(), false, 0.0, &mut dw);
                    if let Some(b) = b {
                        let mut db = vec![0.0; c_out];
                        for row in g.data().chunks(c_out) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        acc(*b, Tensor::new(&[c_out], db).expect("shape"));
                    }
                    acc(*x, Tensor::new(xv.shape(), dx).expect("shape"));
                    acc(*w, Tensor::new(wv.shape(), dw).expect("shape"));
                }
                Op::GraphConv { x, w, adj, agg } => {
                    let (dx, dw) = conv::graph_conv_backward(self.shape(*x), adj, self.value(*w), agg, &g);
                    acc(*x, dx);
                    acc(*w, dw);
                }
                Op::TemporalConv { x, k, stride } => {
                    let (dx, dk) = conv::temporal_conv_backward(self.value(*x), self.value(*k), *stride, &g);
                    acc(*x, dx);
                    acc(*k, dk);
                }
                Op::Norm { x, gamma, beta, xhat, inv_std, batch } => {
                    let (dx, dg, db) = norm::normalize_backward(&g, xhat, inv_std, self.value(*gamma), *batch);
                    acc(*x, dx);
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                Op::Mean { x, axes } => acc(*x, Tensor::mean_axes_backward(&g, self.shape(*x), axes)),
                Op::Permute { x, perm } => {
                    let mut inverse = vec![0; perm.len()];
                    for (k, &p) in perm.iter().enumerate() {
                        inverse[p] = k;
                    }
                    acc(*x, g.permute(&inverse));
                }
                Op::Reshape(x) => acc(*x, g.reshape(self.shape(*x)).expect("same size")),
                Op::Softmax { q, k, v, probs } => {
                    let (dq, dk, dv) =
                        kernels::softmax_backward(self.value(*q), self.value(*k), self.value(*v), probs, &g);
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::Fast { q, k, v, feats, caches } => {
                    let (dq, dk, dv) = kernels::fast_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        &node.value,
                        feats,
                        caches,
                        &g,
                    );
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    acc(*logits, loss::cross_entropy_backward(probs, labels, g.item()));
                }
            }
        }
        Gradients { grads }
    }

    /// Gradients of every named parameter; parameters the root does not
    /// depend on get explicit zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                (name.clone(), g)
            })
            .collect()
    }
}
