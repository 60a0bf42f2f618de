//! Simplified spatio-temporal graph convolution stream.
//!
//! Each block is `graph conv → norm → ReLU → temporal conv → norm → ReLU`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adjacency::AdjacencyStack;
use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::model::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channel widths: input channels followed by each block's output width.
    pub channels: Vec<usize>,
    /// Temporal stride per block.
    pub strides: Vec<usize>,
    pub temporal_kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { channels: vec![3, 16, 32, 32, 64], strides: vec![1, 2, 1, 2], temporal_kernel: 5 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.channels.len() >= 2, "backbone needs at least one block");
        ensure!(
            self.strides.len() + 1 == self.channels.len(),
            "backbone has {} channel widths but {} strides",
            self.channels.len(),
            self.strides.len()
        );
        ensure!(self.channels.iter().all(|&c| c > 0), "channel widths must be positive");
        ensure!(self.strides.iter().all(|&s| s == 1 || s == 2), "strides must be 1 or 2");
        ensure!(self.temporal_kernel % 2 == 1, "temporal kernel {} must be odd", self.temporal_kernel);
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.strides.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    pub fn out_frames(&self, frames: usize) -> usize {
        self.strides.iter().fold(frames, |t, &s| t.div_ceil(s))
    }
}

/// Initialize block parameters under `prefix` (e.g. `joint.body`).
/// Convolutions use fan-in scaled uniform draws; normalization starts at
/// scale 1, shift 0 with running statistics (0, 1).
pub fn init_backbone<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    config: &BackboneConfig,
    subsets: usize,
    rng: &mut R,
) {
    for b in 0..config.blocks() {
        let (c_in, c_out) = (config.channels[b], config.channels[b + 1]);
        let block = format!("{prefix}.block{}", b + 1);
        let bound = (6.0 / (c_in * subsets) as f64).sqrt();
        store.insert_param(&format!("{block}.spatial.W"), Tensor::uniform(&[subsets, c_in, c_out], bound, rng));
        let bound = (6.0 / (c_out * config.temporal_kernel) as f64).sqrt();
        store.insert_param(
            &format!("{block}.temporal.K"),
            Tensor::uniform(&[c_out, c_out, config.temporal_kernel], bound, rng),
        );
        for norm in ["norm1", "norm2"] {
            store.insert_param(&format!("{block}.{norm}.gamma"), Tensor::full(&[c_out], 1.0));
            store.insert_param(&format!("{block}.{norm}.beta"), Tensor::zeros(&[c_out]));
            store.insert_buffer(&format!("{block}.{norm}.running_mean"), Tensor::zeros(&[c_out]));
            store.insert_buffer(&format!("{block}.{norm}.running_var"), Tensor::full(&[c_out], 1.0));
        }
    }
}

/// Whether normalization uses batch statistics or the frozen running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn norm_on_tape(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, mode: Mode) -> Result<Var> {
    let gamma = store.bind(tape, &format!("{name}.gamma"))?;
    let beta = store.bind(tape, &format!("{name}.beta"))?;
    match mode {
        Mode::Train => tape.norm(name, x, gamma, beta, None),
        Mode::Eval => {
            let mean = store.require_buffer(&format!("{name}.running_mean"))?.clone();
            let var = store.require_buffer(&format!("{name}.running_var"))?.clone();
            tape.norm(name, x, gamma, beta, Some((&mean, &var)))
        }
    }
}

/// Run the block chain on an `[N, C_0, T, I, V]` input.
pub fn backbone_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    config: &BackboneConfig,
    adj: &Arc<AdjacencyStack>,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    ensure!(
        shape.len() == 5 && shape[1] == config.channels[0] && shape[4] == adj.nodes(),
        "backbone {prefix}: input {:?} needs {} channels and {} nodes",
        shape,
        config.channels[0],
        adj.nodes()
    );
    let mut h = x;
    for b in 0..config.blocks() {
        let block = format!("{prefix}.block{}", b + 1);
        let w = store.bind(tape, &format!("{block}.spatial.W"))?;
        h = tape.graph_conv(h, adj, w)?;
        h = norm_on_tape(tape, store, &format!("{block}.norm1"), h, mode)?;
        h = tape.relu(h);
        let k = store.bind(tape, &format!("{block}.temporal.K"))?;
        h = tape.temporal_conv(h, k, config.strides[b])?;
        h = norm_on_tape(tape, store, &format!("{block}.norm2"), h, mode)?;
        h = tape.relu(h);
    }
    Ok(h)
}

/// Plain evaluation of the stream: `[N, C_0, T, I, V] → [N, C, T', I, V]`.
pub fn backbone_forward(
    x: &Tensor,
    store: &ParamStore,
    prefix: &str,
    config: &BackboneConfig,
    adj: &Arc<AdjacencyStack>,
    mode: Mode,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = backbone_on_tape(&mut tape, store, prefix, config, adj, xv, mode)?;
    Ok(tape.value(out).clone())
}
