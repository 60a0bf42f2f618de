//! Analytic FLOP and parameter accounting for one input sample.
//!
//! One multiply-add counts as 2 FLOPs; normalization, softmax, rectifiers and
//! pooling are not counted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::attention::Axis;
use crate::error::Result;
use crate::model::{ModelConfig, Variant};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    pub breakdown: BTreeMap<String, Cost>,
}

impl CostReport {
    pub fn report(&self) -> String {
        let mut out = String::new();
        for (name, c) in &self.breakdown {
            out.push_str(&format!("{name} flops={} params={}\n", c.flops, c.params));
        }
        out.push_str(&format!("total flops={} params={}\n", self.flops, self.params));
        out
    }
}

/// Accumulates named cost entries; repeated names add up.
#[derive(Debug, Clone, Default)]
pub struct CostBuilder {
    entries: BTreeMap<String, Cost>,
}

fn u(x: usize) -> u64 {
    x as u64
}

impl CostBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, flops: u64, params: u64) -> &mut Self {
        let e = self.entries.entry(name.to_string()).or_default();
        e.flops += flops;
        e.params += params;
        self
    }

    /// Dense layer applied to `tokens` positions.
    pub fn fc(&mut self, name: &str, c_in: usize, c_out: usize, tokens: usize, bias: bool) -> &mut Self {
        let params = u(c_in * c_out) + if bias { u(c_out) } else { 0 };
        self.add(name, 2 * u(c_in) * u(c_out) * u(tokens), params)
    }

    /// Adjacency aggregation over `S` subsets plus the channel mix.
    pub fn graph_conv(&mut self, name: &str, s: usize, c_in: usize, c_out: usize, t: usize, i: usize, v: usize) -> &mut Self {
        let aggregate = 2 * u(s) * u(c_in) * u(v) * u(v) * u(t) * u(i);
        let mix = 2 * u(c_in) * u(c_out) * u(s) * u(t * i * v);
        self.add(name, aggregate + mix, u(s * c_in * c_out))
    }

    pub fn temporal_conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, t_out: usize, i: usize, v: usize) -> &mut Self {
        self.add(name, 2 * u(c_in) * u(c_out) * u(k) * u(t_out * i * v), u(c_in * c_out * k))
    }

    pub fn norm(&mut self, name: &str, c: usize) -> &mut Self {
        self.add(name, 0, 2 * u(c))
    }

    pub fn exact_attention(&mut self, name: &str, lq: usize, lk: usize, d: usize, dv: usize) -> &mut Self {
        self.add(name, 4 * u(lq) * u(lk) * u(d) + 2 * u(lq) * u(lk) * u(dv), 0)
    }

    pub fn fast_attention(&mut self, name: &str, lq: usize, lk: usize, d: usize, dv: usize, m: usize) -> &mut Self {
        let l = u(lq + lk);
        self.add(name, 2 * u(m) * l * u(d + dv) + 2 * l * u(m) * u(d), 0)
    }

    /// One attention direction with projections: queries from `lq` tokens,
    /// keys and values from `lk` tokens, all of width `c`.
    pub fn attention_block(&mut self, name: &str, c: usize, d: usize, lq: usize, lk: usize, fast: Option<usize>) -> &mut Self {
        self.fc(name, c, d, lq, false).fc(name, c, d, lk, false).fc(name, c, d, lk, false);
        match fast {
            Some(m) => self.fast_attention(name, lq, lk, d, d, m),
            None => self.exact_attention(name, lq, lk, d, d),
        };
        self.fc(name, d, c, lq, false)
    }

    pub fn finish(self) -> CostReport {
        let flops = self.entries.values().map(|c| c.flops).sum();
        let params = self.entries.values().map(|c| c.params).sum();
        CostReport { flops, params, breakdown: self.entries }
    }
}

/// Which parts of the model run at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    Full,
    /// Only the two expertized branches of the four-branch model.
    ExpertOnly,
}

fn backbone(b: &mut CostBuilder, prefix: &str, cfg: &ModelConfig) {
    let bc = &cfg.backbone;
    let (s, v) = (cfg.subsets(), cfg.nodes());
    let mut t = cfg.frames;
    for blk in 0..bc.blocks() {
        let (c_in, c_out) = (bc.channels[blk], bc.channels[blk + 1]);
        let name = format!("{prefix}.block{}", blk + 1);
        b.graph_conv(&format!("{name}.spatial"), s, c_in, c_out, t, 2, v);
        b.norm(&format!("{name}.norm1"), c_out);
        t = t.div_ceil(bc.strides[blk]);
        b.temporal_conv(&format!("{name}.temporal"), c_out, c_out, bc.temporal_kernel, t, 2, v);
        b.norm(&format!("{name}.norm2"), c_out);
    }
}

/// Cost of one modality's model on one sample.
pub fn count_cost(cfg: &ModelConfig, inference: Inference) -> Result<CostReport> {
    cfg.validate()?;
    let mut b = CostBuilder::new();
    backbone(&mut b, "body", cfg);
    backbone(&mut b, "hand", cfg);
    let (c, k, d, m) = (cfg.backbone.out_channels(), cfg.num_classes, cfg.attention_width(), cfg.random_features);
    let (t, v) = (cfg.backbone.out_frames(cfg.frames), cfg.nodes());
    let tokens = t * 2 * v;
    let cross = |b: &mut CostBuilder, prefix: &str, l: usize, fast: Option<usize>| {
        b.attention_block(&format!("{prefix}.to_body"), c, d, l, l, fast);
        b.attention_block(&format!("{prefix}.to_hand"), c, d, l, l, fast);
    };
    match cfg.variant {
        Variant::ScoreFusion => {}
        Variant::StandardXattn => cross(&mut b, "xattn", tokens, None),
        Variant::FastXattn => cross(&mut b, "xattn", tokens, Some(m)),
        Variant::Pam => {
            for axis in Axis::ALL {
                let l = match axis {
                    Axis::T => t,
                    Axis::V => v,
                    Axis::I => 2,
                };
                cross(&mut b, &format!("pam.{}", axis.name()), l, Some(m));
            }
        }
        Variant::Expertized => {
            if inference == Inference::Full {
                cross(&mut b, "xattn", tokens, Some(m));
            }
        }
    }
    if cfg.variant == Variant::Expertized {
        let branches: &[usize] = if inference == Inference::Full { &[1, 2, 3, 4] } else { &[1, 2] };
        for i in branches {
            b.fc(&format!("branch{i}.fc"), c, k, 1, true);
        }
    } else {
        b.fc("body.fc", c, k, 1, true);
        b.fc("hand.fc", c, k, 1, true);
    }
    Ok(b.finish())
}

/// Sum over the run's streams, each entry prefixed by its stream name.
pub fn count_run_cost(run: &RunConfig, inference: Inference) -> Result<CostReport> {
    let one = count_cost(&run.model, inference)?;
    let mut b = CostBuilder::new();
    for s in &run.streams {
        for (name, c) in &one.breakdown {
            b.add(&format!("{}.{name}", s.name()), c.flops, c.params);
        }
    }
    Ok(b.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fc_micro_example() {
        let mut b = CostBuilder::new();
        b.fc("fc", 4, 3, 1, true);
        let r = b.finish();
        assert_eq!((r.params, r.flops), (15, 24));
        assert_eq!(CostBuilder::new().finish(), CostReport::default());
    }

    #[test]
    fn totals_match_breakdown() {
        for v in Variant::ALL {
            let r = count_cost(&ModelConfig { variant: v, ..ModelConfig::default() }, Inference::Full).unwrap();
            assert_eq!(r.flops, r.breakdown.values().map(|c| c.flops).sum::<u64>());
            assert_eq!(r.params, r.breakdown.values().map(|c| c.params).sum::<u64>());
        }
    }
}
