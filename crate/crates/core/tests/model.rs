use approx::assert_abs_diff_eq;
use bharnet::attention::{cross_attend, fast_attention, softmax_attention, CrossAttentionParams, PamParams, pam_forward, pooled_axis_views};
use bharnet::data::Modality;
use bharnet::graph::{backbone_forward, BackboneConfig, Mode};
use bharnet::model::{
    expert_only_predict, BranchOutputs, Checkpoint, GraphLayout, Logits, LossWeights, Model, ModelConfig, ModelOutput,
    Variant,
};
use bharnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        num_classes: 4,
        frames: 6,
        backbone: BackboneConfig { channels: vec![3, 6, 8], strides: vec![1, 2], temporal_kernel: 3 },
        attention_dim: Some(5),
        random_features: 16,
        layout: GraphLayout::Path { nodes: 6 },
        ..ModelConfig::default()
    }
}

fn inputs(seed: u64, n: usize) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    (Tensor::randn(&[n, 3, 6, 2, 6], &mut r), Tensor::randn(&[n, 3, 6, 2, 6], &mut r))
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.zip_map(b, |x, y| (x - y).abs()).max_abs()
}

fn token_mean(f: &Tensor) -> Tensor {
    f.mean_axes(&[2, 3, 4])
}

fn fc(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, c, k) = (x.dim(0), w.dim(0), w.dim(1));
    Tensor::from_fn(&[n, k], |ix| b.data()[ix[1]] + (0..c).map(|j| x.at(&[ix[0], j]) * w.at(&[j, ix[1]])).sum::<f64>())
}

#[test]
fn every_variant_gives_n_by_k_logits() {
    let (xb, xh) = inputs(1, 3);
    for v in Variant::ALL {
        let model = Model::init(small(v), 2).unwrap();
        let out = model.forward(&xb, &xh, Mode::Eval).unwrap();
        assert_eq!(out.fused().unwrap().tensor().shape(), [3, 4], "{v:?}");
        assert_eq!(out.body().tensor().shape(), [3, 4]);
        assert_eq!(out.hand().tensor().shape(), [3, 4]);
    }
}

#[test]
fn pam_model_is_backbones_then_module() {
    let cfg = small(Variant::Pam);
    let model = Model::init(cfg.clone(), 4).unwrap();
    let (xb, xh) = inputs(5, 2);
    let (adj_b, adj_h) = model.adjacency();
    let fb = backbone_forward(&xb, model.store(), "body", &cfg.backbone, adj_b, Mode::Eval).unwrap();
    let fh = backbone_forward(&xh, model.store(), "hand", &cfg.backbone, adj_h, Mode::Eval).unwrap();
    let params = PamParams::from_store(model.store(), "pam").unwrap();
    let (yb, yh) = pam_forward(&fb, &fh, &params).unwrap();
    let out = model.forward(&xb, &xh, Mode::Eval).unwrap();
    assert_eq!(max_diff(out.body().tensor(), yb.tensor()), 0.0);
    assert_eq!(max_diff(out.hand().tensor(), yh.tensor()), 0.0);

    // Manual composition of the module itself.
    let views_b = pooled_axis_views(&fb).unwrap();
    let views_h = pooled_axis_views(&fh).unwrap();
    let mut sum_b = Tensor::zeros(&[2, 8]);
    for ((vb, vh), p) in views_b.iter().zip(&views_h).zip(&params.axes) {
        let (ab, _) = cross_attend(&vb.tokens, &vh.tokens, p).unwrap();
        sum_b.add_assign(&ab.mean_axes(&[1]));
    }
    let manual = fc(&sum_b, &params.body_fc.0, &params.body_fc.1);
    assert!(max_diff(&manual, yb.tensor()) < 1e-12);
}

#[test]
fn pam_zero_classifier_returns_bias_and_is_symmetric() {
    let cfg = small(Variant::Pam);
    let mut model = Model::init(cfg, 6).unwrap();
    let (xb, xh) = inputs(7, 2);
    {
        let store = model.store_mut();
        for s in ["body", "hand"] {
            let w = store.get_mut(&format!("{s}.fc.W")).unwrap();
            *w = Tensor::zeros(w.shape());
            *store.get_mut(&format!("{s}.fc.b")).unwrap() = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        }
    }
    let out = model.forward(&xb, &xh, Mode::Eval).unwrap();
    for row in 0..2 {
        assert_eq!(out.body().row(row), [0.5, -1.0, 2.0, 0.0]);
        assert_eq!(out.hand().row(row), [0.5, -1.0, 2.0, 0.0]);
    }

    // Shared parameters on both sides plus identical features give identical logits.
    let model = Model::init(small(Variant::Pam), 8).unwrap();
    let mut p = PamParams::from_store(model.store(), "pam").unwrap();
    for axis in &mut p.axes {
        axis.to_hand = axis.to_body.clone();
    }
    p.hand_fc = p.body_fc.clone();
    let f = Tensor::randn(&[2, 8, 3, 2, 6], &mut rng(9));
    let (yb, yh) = pam_forward(&f, &f, &p).unwrap();
    assert_eq!(yb, yh);
}

#[test]
fn pam_constant_features_depend_only_on_parameters() {
    let model = Model::init(small(Variant::Pam), 10).unwrap();
    let p = PamParams::from_store(model.store(), "pam").unwrap();
    let a = pam_forward(&Tensor::full(&[1, 8, 3, 2, 6], 0.4), &Tensor::full(&[1, 8, 3, 2, 6], -0.2), &p).unwrap();
    let b = pam_forward(&Tensor::full(&[1, 8, 5, 2, 4], 0.4), &Tensor::full(&[1, 8, 2, 2, 9], -0.2), &p).unwrap();
    assert!(max_diff(a.0.tensor(), b.0.tensor()) < 1e-12);
    assert!(max_diff(a.1.tensor(), b.1.tensor()) < 1e-12);
}

#[test]
fn expertized_branches_compose() {
    let cfg = small(Variant::Expertized);
    let model = Model::init(cfg.clone(), 11).unwrap();
    let (xb, xh) = inputs(12, 3);
    let ModelOutput::Branches(out) = model.forward(&xb, &xh, Mode::Eval).unwrap() else {
        panic!("expertized model returns branches")
    };
    let (adj_b, _) = model.adjacency();
    let fb = backbone_forward(&xb, model.store(), "body", &cfg.backbone, adj_b, Mode::Eval).unwrap();
    let s = model.store();
    let y1 = fc(&token_mean(&fb), s.get("branch1.fc.W").unwrap(), s.get("branch1.fc.b").unwrap());
    assert!(max_diff(&y1, out.expert_body.tensor()) < 1e-12);

    let experts = out.expert_body.add(&out.expert_hand).unwrap();
    let interactive = out.interactive_body.add(&out.interactive_hand).unwrap();
    let rest = out.fused.tensor().zip_map(interactive.tensor(), |f, i| f - i);
    assert!(max_diff(&rest, experts.tensor()) < 1e-12);
}

#[test]
fn expertized_zero_classifiers_give_zero_logits() {
    let mut model = Model::init(small(Variant::Expertized), 13).unwrap();
    for b in 1..=4 {
        for part in ["W", "b"] {
            let t = model.store_mut().get_mut(&format!("branch{b}.fc.{part}")).unwrap();
            *t = Tensor::zeros(t.shape());
        }
    }
    let (xb, xh) = inputs(14, 2);
    let ModelOutput::Branches(out) = model.forward(&xb, &xh, Mode::Eval).unwrap() else { panic!() };
    assert!(out.fused.tensor().data().iter().all(|&x| x == 0.0));
    assert_eq!(expert_only_predict(&out).unwrap().predictions(), [0, 0]);
}

#[test]
fn crafted_interactive_logits_flip_the_fused_argmax() {
    let y = |rows: &[Vec<f64>]| Logits::from_rows(rows).unwrap();
    let out = BranchOutputs::from_branches(
        y(&[vec![1.0, 0.0, 0.0]]),
        y(&[vec![0.5, 0.2, 0.0]]),
        y(&[vec![0.0, 3.0, 0.0]]),
        y(&[vec![0.0, 0.0, 0.0]]),
    )
    .unwrap();
    assert_eq!(expert_only_predict(&out).unwrap().predictions(), [0]);
    assert_eq!(out.fused.predictions(), [1]);
    let zero = y(&[vec![0.0; 3]]);
    let plain = BranchOutputs::from_branches(y(&[vec![0.1, 0.9, 0.3]]), y(&[vec![0.4, 0.0, 0.3]]), zero.clone(), zero).unwrap();
    assert_eq!(expert_only_predict(&plain).unwrap().predictions(), plain.fused.predictions());
}

#[test]
fn expert_weights_seed_the_four_branches() {
    let experts = Model::init(small(Variant::ScoreFusion), 15).unwrap();
    let mut model = Model::init(small(Variant::Expertized), 16).unwrap();
    let copied = model.load_experts(&experts).unwrap();
    assert!(copied > 0);
    let (s, e) = (model.store(), experts.store());
    for (branch, src) in [("branch1", "body"), ("branch2", "hand"), ("branch3", "body"), ("branch4", "hand")] {
        assert_eq!(s.get(&format!("{branch}.fc.W")).unwrap(), e.get(&format!("{src}.fc.W")).unwrap());
    }
    assert!(!s.contains_prefix("body.fc"));
    for (name, t) in e.parameters().filter(|(n, _)| n.starts_with("body.block")) {
        assert_eq!(s.get(name).unwrap(), t);
    }
}

#[test]
fn checkpoint_round_trip_keeps_weights_and_lambdas() {
    let joint = Model::init(small(Variant::FastXattn), 17).unwrap();
    let bone = Model::init(small(Variant::FastXattn), 18).unwrap();
    let w = LossWeights::new(0.3, 1.0 / 3.0, 2.5).unwrap();
    let ck = Checkpoint::new(&[(Modality::Joint, &joint), (Modality::Bone, &bone)], w).unwrap();
    let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
    assert_eq!(back.loss_weights, w);
    assert_eq!(back, ck);
    let (xb, xh) = inputs(19, 2);
    let restored = back.model(Modality::Bone).unwrap();
    assert_eq!(
        restored.forward(&xb, &xh, Mode::Eval).unwrap(),
        bone.forward(&xb, &xh, Mode::Eval).unwrap()
    );
    assert_eq!(ck.model(Modality::Joint).unwrap().store(), joint.store());

    let mut broken = ck.clone();
    broken.variant = Variant::Pam;
    assert_eq!(broken.validate().unwrap_err().category(), "validation");
    let only_joint = Checkpoint::new(&[(Modality::Joint, &joint)], w).unwrap();
    assert!(only_joint.model(Modality::Bone).is_err());
}

#[test]
fn batched_prediction_matches_single_pass() {
    let model = Model::init(small(Variant::StandardXattn), 20).unwrap();
    let (xb, xh) = inputs(21, 7);
    let whole = model.forward(&xb, &xh, Mode::Eval).unwrap();
    let chunked = model.predict(&xb, &xh, 3).unwrap();
    assert!(max_diff(whole.fused().unwrap().tensor(), chunked.fused().unwrap().tensor()) < 1e-12);
}

#[test]
fn cross_attention_examples() {
    let mut r = rng(22);
    let model = Model::init(small(Variant::FastXattn), 23).unwrap();
    let p = CrossAttentionParams::from_store(model.store(), "xattn").unwrap();
    let body = Tensor::randn(&[2, 5, 8], &mut r);
    let v: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
    let hand = Tensor::from_fn(&[2, 4, 8], |ix| v[ix[2]]);
    let (fb, _) = cross_attend(&body, &hand, &p).unwrap();
    // OutProj(VProj(v)).
    let vv: Vec<f64> = (0..5).map(|j| (0..8).map(|c| v[c] * p.to_body.value.at(&[c, j])).sum()).collect();
    let expect: Vec<f64> = (0..8).map(|c| (0..5).map(|j| vv[j] * p.to_body.output.at(&[j, c])).sum()).collect();
    for n in 0..2 {
        for l in 0..5 {
            for c in 0..8 {
                assert_abs_diff_eq!(fb.at(&[n, l, c]), expect[c], epsilon = 1e-12);
            }
        }
    }

    let mut zeroed = p.clone();
    zeroed.to_body.output = Tensor::zeros(zeroed.to_body.output.shape());
    zeroed.to_hand.output = Tensor::zeros(zeroed.to_hand.output.shape());
    let (zb, zh) = cross_attend(&body, &Tensor::randn(&[2, 4, 8], &mut r), &zeroed).unwrap();
    assert_eq!(zb.max_abs() + zh.max_abs(), 0.0);
}

#[test]
fn exact_attention_rows_are_convex_combinations() {
    let mut r = rng(24);
    let q = Tensor::randn(&[6, 4], &mut r);
    let k = Tensor::randn(&[9, 4], &mut r);
    let v = Tensor::randn(&[9, 3], &mut r);
    let out = softmax_attention(&q, &k, &v).unwrap();
    for c in 0..3 {
        let col: Vec<f64> = (0..9).map(|j| v.at(&[j, c])).collect();
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        for i in 0..6 {
            assert!(out.at(&[i, c]) >= lo - 1e-9 && out.at(&[i, c]) <= hi + 1e-9);
        }
    }
    // One key: the normalizer cancels for both kernels.
    let k1 = Tensor::randn(&[1, 4], &mut r);
    let v1 = Tensor::randn(&[1, 3], &mut r);
    let f = fast_attention(&q, &k1, &v1, 32, 3).unwrap();
    for i in 0..6 {
        for c in 0..3 {
            assert_abs_diff_eq!(f.at(&[i, c]), v1.at(&[0, c]), epsilon = 1e-14);
        }
    }
}

#[test]
fn underflowing_normalizer_is_a_numeric_error() {
    let q = Tensor::full(&[2, 4], 1.0e3);
    let k = Tensor::full(&[3, 4], -1.0e3);
    let v = Tensor::full(&[3, 2], 1.0);
    let err = fast_attention(&q, &k, &v, 8, 1).unwrap_err();
    assert_eq!(err.category(), "numeric");
    assert!(err.to_string().contains("row"), "{err}");
}

#[test]
fn model_rejects_missing_parameters() {
    let model = Model::init(small(Variant::Pam), 25).unwrap();
    let mut store = model.store().clone();
    store.remove_prefix("pam.v");
    assert!(Model::from_store(small(Variant::Pam), store).is_err());
}
