//! Central finite-difference gradient checks on seeded tiny instances.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{pam_on_tape, AttentionKind, AttentionParams, RandomFeatures};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::adjacency::{normalize_adjacency, Partition};
use crate::graph::backbone::{backbone_on_tape, init_backbone, BackboneConfig, Mode};
use crate::graph::topology::GraphTopology;
use crate::model::{GraphLayout, LossWeights, Model, ModelConfig, ParamStore, Variant};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
/// Denominator floor for the relative error.
pub const FLOOR: f64 = 1e-6;

pub const TARGETS: &[&str] = &[
    "square",
    "relu",
    "exp",
    "scale_add",
    "linear",
    "mean_permute",
    "cross_entropy",
    "graph_conv",
    "temporal_conv",
    "norm_train",
    "norm_eval",
    "softmax_attention",
    "fast_attention",
    "pam_module",
    "backbone",
    "score_fusion",
    "standard_xattn",
    "fast_xattn",
    "pam",
    "expertized",
];

/// Targets whose maps are elementwise.
pub const ELEMENTWISE: &[&str] = &["square", "relu", "exp", "scale_add"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub target: String,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub groups: Vec<GroupError>,
    pub warnings: Vec<String>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn report(&self) -> String {
        let mut out = String::new();
        for w in &self.warnings {
            out.push_str(&format!("warning {w}\n"));
        }
        for g in &self.groups {
            out.push_str(&format!(
                "group {} max_rel_error={:.3e} probes={} kinks={}\n",
                g.name, g.max_rel_error, g.probes, g.kinks
            ));
        }
        out.push_str(&format!(
            "{} {} max_rel_error={:.3e} tol={:.1e}\n",
            if self.passed { "PASS" } else { "FAIL" },
            self.target,
            self.max_rel_error,
            self.tolerance
        ));
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

type Build = Box<dyn Fn(&mut Tape, &[Var], &ParamStore) -> Result<Var> + Send + Sync>;

/// Scalar function of free inputs and of the parameters in `store`.
pub struct Problem {
    pub inputs: Vec<(String, Tensor)>,
    pub store: ParamStore,
    pub build: Build,
}

impl Problem {
    fn eval(&self, inputs: &[Tensor], store: &ParamStore) -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = (self.build)(&mut tape, &vars, store)?;
        Ok((tape.value(root).item(), tape.relu_pattern()))
    }
}

/// Reduce any output to a scalar with fixed, non-uniform weights.
fn probe_loss(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut i = 0usize;
    let w = Tensor::from_fn(&shape, |_| {
        i += 1;
        (1.3 * i as f64 + 0.7).sin()
    });
    tape.dot(y, w)
}

enum Slot {
    Input(usize),
    Param(String),
}

pub fn check_problem(target: &str, problem: &Problem, tolerance: f64) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = problem.inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let root = (problem.build)(&mut tape, &vars, &problem.store)?;
    let grads = tape.backward(root);
    let param_grads = tape.param_grads(&grads);

    let mut groups: Vec<(String, Slot, Tensor, Tensor)> = Vec::new();
    for ((name, t), v) in problem.inputs.iter().zip(&vars) {
        let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        groups.push((name.clone(), Slot::Input(groups.len()), t.clone(), g));
    }
    for (name, t) in problem.store.parameters() {
        let g = param_grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        groups.push((name.clone(), Slot::Param(name.clone()), t.clone(), g));
    }
    let probes: Vec<(usize, usize)> =
        groups.iter().enumerate().flat_map(|(g, (_, _, t, _))| (0..t.len()).map(move |i| (g, i))).collect();

    let results = exec::map_slice(&probes, |&(g, i)| -> Result<(f64, bool)> {
        let (_, slot, value, grad) = &groups[g];
        let eval_at = |delta: f64| -> Result<(f64, Vec<bool>)> {
            let mut t = value.clone();
            t.data_mut()[i] += delta;
            match slot {
                Slot::Input(k) => {
                    let mut inputs: Vec<Tensor> = problem.inputs.iter().map(|(_, x)| x.clone()).collect();
                    inputs[*k] = t;
                    problem.eval(&inputs, &problem.store)
                }
                Slot::Param(name) => {
                    let inputs: Vec<Tensor> = problem.inputs.iter().map(|(_, x)| x.clone()).collect();
                    let mut store = problem.store.clone();
                    *store.get_mut(name).expect("parameter exists") = t;
                    problem.eval(&inputs, &store)
                }
            }
        };
        let (fp, pp) = eval_at(STEP)?;
        let (fm, pm) = eval_at(-STEP)?;
        if pp != pm {
            return Ok((0.0, true));
        }
        let numeric = (fp - fm) / (2.0 * STEP);
        Ok((relative_error(grad.data()[i], numeric), false))
    });

    let mut report_groups: Vec<GroupError> = groups
        .iter()
        .map(|(name, _, t, _)| GroupError { name: name.clone(), max_rel_error: 0.0, probes: t.len(), kinks: 0 })
        .collect();
    let mut warnings = Vec::new();
    for (&(g, i), r) in probes.iter().zip(results) {
        let (err, kink) = r?;
        let entry = &mut report_groups[g];
        if kink {
            entry.kinks += 1;
            warnings.push(format!("kink at {}[{i}]: rectifier pattern changes within the step, excluded", entry.name));
        } else if !(err <= entry.max_rel_error) {
            entry.max_rel_error = err;
        }
    }
    let max_rel_error = report_groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        target: target.to_string(),
        tolerance,
        max_rel_error,
        passed: max_rel_error < tolerance,
        groups: report_groups,
        warnings,
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn inputs(list: &[(&str, Tensor)]) -> Vec<(String, Tensor)> {
    list.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

fn op_problem(
    list: &[(&str, Tensor)],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> Problem {
    Problem {
        inputs: inputs(list),
        store: ParamStore::default(),
        build: Box::new(move |tape, v, _| {
            let y = f(tape, v)?;
            probe_loss(tape, y)
        }),
    }
}

/// Model dimensions used for full-variant checks: 4 channels, 4 frames,
/// a 5-node path graph and 3 classes.
pub fn tiny_model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        num_classes: 3,
        frames: 4,
        backbone: BackboneConfig { channels: vec![3, 4, 4], strides: vec![1, 2], temporal_kernel: 3 },
        partition: Partition::Distance,
        attention_dim: Some(4),
        random_features: 8,
        layout: GraphLayout::Path { nodes: 5 },
    }
}

fn model_problem(variant: Variant, seed: u64) -> Result<Problem> {
    let model = Model::init(tiny_model_config(variant), seed)?;
    let mut r = rng(seed.wrapping_add(1));
    let xb = Tensor::randn(&[2, 3, 4, 2, 5], &mut r);
    let xh = Tensor::randn(&[2, 3, 4, 2, 5], &mut r);
    let store = model.store().clone();
    let weights = LossWeights { lambda_body: 1.0, lambda_hand: 0.5, lambda_cpl: 2.0 };
    Ok(Problem {
        inputs: inputs(&[("input.body", xb), ("input.hand", xh)]),
        store,
        build: Box::new(move |tape, v, store| {
            let m = model.with_store(store.clone());
            let out = m.forward_on_tape(tape, v[0], v[1], Mode::Train)?;
            out.loss(tape, &[0, 2], &weights)
        }),
    })
}

/// The registered instance for `target`.
pub fn problem(target: &str, seed: u64) -> Result<Problem> {
    let mut r = rng(seed);
    let sym = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::uniform(shape, 1.0, r);
    Ok(match target {
        "square" => op_problem(&[("x", Tensor::scalar(3.0))], |t, v| Ok(t.square(v[0]))),
        "relu" => {
            let mut x = sym(&[12], &mut r);
            x.data_mut()[0] = 0.0;
            op_problem(&[("x", x)], |t, v| Ok(t.relu(v[0])))
        }
        "exp" => op_problem(&[("x", sym(&[8], &mut r))], |t, v| Ok(t.exp(v[0]))),
        "scale_add" => op_problem(&[("a", sym(&[6], &mut r)), ("b", sym(&[6], &mut r))], |t, v| {
            let s = t.scale(v[0], 2.5);
            t.add(s, v[1])
        }),
        "linear" => op_problem(
            &[("x", sym(&[2, 3, 4], &mut r)), ("W", sym(&[4, 5], &mut r)), ("b", sym(&[5], &mut r))],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        ),
        "mean_permute" => op_problem(&[("x", sym(&[2, 3, 4, 5], &mut r))], |t, v| {
            let m = t.mean(v[0], &[1, 3]);
            let p = t.permute(m, &[1, 0]);
            t.reshape(p, &[8])
        }),
        "cross_entropy" => Problem {
            inputs: inputs(&[("logits", sym(&[4, 5], &mut r).scale(3.0))]),
            store: ParamStore::default(),
            build: Box::new(|t, v, _| t.cross_entropy(v[0], &[0, 4, 2, 2])),
        },
        "graph_conv" => {
            let adj = Arc::new(normalize_adjacency(&GraphTopology::path(5), Partition::Distance));
            op_problem(&[("x", sym(&[2, 3, 4, 2, 5], &mut r)), ("W", sym(&[3, 3, 4], &mut r))], move |t, v| {
                t.graph_conv(v[0], &adj, v[1])
            })
        }
        "temporal_conv" => op_problem(
            &[("x", sym(&[2, 3, 5, 2, 3], &mut r)), ("K", sym(&[3, 3, 3], &mut r))],
            |t, v| t.temporal_conv(v[0], v[1], 2),
        ),
        "norm_train" => op_problem(
            &[("x", sym(&[3, 4, 3, 2, 2], &mut r)), ("gamma", sym(&[4], &mut r)), ("beta", sym(&[4], &mut r))],
            |t, v| t.norm("n", v[0], v[1], v[2], None),
        ),
        "norm_eval" => {
            let mean = sym(&[4], &mut r);
            let var = sym(&[4], &mut r).map(|x| 0.5 + x.abs());
            op_problem(
                &[("x", sym(&[3, 4, 3, 2, 2], &mut r)), ("gamma", sym(&[4], &mut r)), ("beta", sym(&[4], &mut r))],
                move |t, v| t.norm("n", v[0], v[1], v[2], Some((&mean, &var))),
            )
        }
        "softmax_attention" => op_problem(
            &[("q", sym(&[2, 5, 4], &mut r)), ("k", sym(&[2, 6, 4], &mut r)), ("v", sym(&[2, 6, 3], &mut r))],
            |t, v| t.softmax_attention(v[0], v[1], v[2]),
        ),
        "fast_attention" => {
            let feats = Arc::new(RandomFeatures::draw(4, 16, seed));
            op_problem(
                &[("q", sym(&[2, 5, 4], &mut r)), ("k", sym(&[2, 6, 4], &mut r)), ("v", sym(&[2, 6, 3], &mut r))],
                move |t, v| t.fast_attention(v[0], v[1], v[2], &feats),
            )
        }
        "pam_module" => {
            let mut store = ParamStore::default();
            for axis in ["t", "v", "i"] {
                for dir in ["to_body", "to_hand"] {
                    AttentionParams::init(4, 4, AttentionKind::Fast, 8, &mut r).insert_into(&mut store, &format!("pam.{axis}.{dir}"));
                }
            }
            for s in ["body", "hand"] {
                store.insert_param(&format!("{s}.fc.W"), sym(&[4, 3], &mut r));
                store.insert_param(&format!("{s}.fc.b"), sym(&[3], &mut r));
            }
            Problem {
                inputs: inputs(&[("F_B", sym(&[2, 4, 3, 2, 5], &mut r)), ("F_H", sym(&[2, 4, 3, 2, 5], &mut r))]),
                store,
                build: Box::new(|t, v, store| {
                    let (yb, yh) = pam_on_tape(t, store, "pam", v[0], v[1])?;
                    let lb = probe_loss(t, yb)?;
                    let lh = t.scale(yh, 0.5);
                    let lh = probe_loss(t, lh)?;
                    t.add(lb, lh)
                }),
            }
        }
        "backbone" => {
            let cfg = BackboneConfig { channels: vec![3, 4, 4], strides: vec![1, 2], temporal_kernel: 3 };
            let adj = Arc::new(normalize_adjacency(&GraphTopology::path(5), Partition::Distance));
            let mut store = ParamStore::default();
            init_backbone(&mut store, "body", &cfg, adj.subsets(), &mut r);
            for (name, _) in store.clone().parameters() {
                if name.ends_with(".beta") || name.ends_with(".gamma") {
                    let n = store.get(name)?.len();
                    let base = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
                    *store.get_mut(name).expect("present") = sym(&[n], &mut r).map(|x| base + 0.3 * x);
                }
            }
            Problem {
                inputs: inputs(&[("x", Tensor::randn(&[2, 3, 4, 2, 5], &mut r))]),
                store,
                build: Box::new(move |t, v, store| {
                    let y = backbone_on_tape(t, store, "body", &cfg, &adj, v[0], Mode::Train)?;
                    probe_loss(t, y)
                }),
            }
        }
        other => match Variant::parse(other) {
            Ok(v) => model_problem(v, seed)?,
            Err(_) => {
                return Err(Error::validation(format!(
                    "unregistered gradient-check target '{other}' (known: {})",
                    TARGETS.join(", ")
                )))
            }
        },
    })
}

pub fn grad_check(target: &str, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let p = problem(target, seed)?;
    check_problem(target, &p, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_calibration() {
        let r = grad_check("square", 0, 1e-8).unwrap();
        assert!(r.passed, "{}", r.report());
        let p = problem("square", 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let root = (p.build)(&mut tape, &[x], &p.store).unwrap();
        let g = tape.backward(root);
        let w = (1.3f64 + 0.7).sin();
        assert!((g.get(x).unwrap().item() - 6.0 * w).abs() < 1e-12);
    }

    #[test]
    fn relu_zero_is_flagged() {
        let r = grad_check("relu", 0, 1e-6).unwrap();
        assert_eq!(r.groups[0].kinks, 1);
        assert!(r.warnings[0].contains("x[0]"));
        assert!(r.passed);
    }

    #[test]
    fn unknown_target_is_rejected() {
        assert_eq!(grad_check("nope", 0, 1e-4).unwrap_err().category(), "validation");
    }
}
