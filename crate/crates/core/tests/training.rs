use std::collections::BTreeMap;

use bharnet::data::{synth_generate, ClassProfile, Modality, SynthSpec};
use bharnet::graph::BackboneConfig;
use bharnet::harness::{evaluate, train, DataSource, Metrics, Phase, RunConfig, StreamScore};
use bharnet::model::{Checkpoint, Logits, LossWeights, Model, ModelConfig, Variant};
use bharnet::Tensor;

fn tiny_model(variant: Variant, classes: usize) -> ModelConfig {
    ModelConfig {
        variant,
        num_classes: classes,
        frames: 8,
        backbone: BackboneConfig { channels: vec![3, 8], strides: vec![2], temporal_kernel: 3 },
        attention_dim: Some(8),
        random_features: 16,
        ..ModelConfig::default()
    }
}

fn two_class_spec() -> SynthSpec {
    SynthSpec {
        num_classes: 2,
        per_class_train: 8,
        per_class_test: 4,
        frames: 12,
        class_profile: vec![ClassProfile::Mixed, ClassProfile::Mixed],
        ..SynthSpec::default()
    }
}

#[test]
fn separable_two_class_loss_drops_tenfold_in_200_steps() {
    let mut model = tiny_model(Variant::ScoreFusion, 2);
    model.backbone = BackboneConfig { channels: vec![3, 16, 16], strides: vec![1, 2], temporal_kernel: 3 };
    // 16 samples in batches of 8: two steps per epoch.
    let cfg = RunConfig {
        model,
        data: DataSource::Synth { spec: two_class_spec(), seed: 3 },
        epochs: 100,
        cold_start: true,
        batch_size: 8,
        eval_each_epoch: false,
        ..RunConfig::default()
    };
    let out = train(&cfg).unwrap();
    assert_eq!(out.history.len(), 100);
    let first = out.history[0].train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(last < first / 10.0, "loss {first} -> {last}");
    assert_eq!(out.metrics.loss_history.len(), 100);
}

#[test]
fn two_phase_protocol_records_both_phases() {
    let cfg = RunConfig {
        model: tiny_model(Variant::Expertized, 2),
        data: DataSource::Synth { spec: two_class_spec(), seed: 3 },
        epochs: 3,
        expert_epochs: 2,
        batch_size: 8,
        streams: vec![Modality::Joint, Modality::Bone],
        loss_weights: LossWeights::new(1.0, 0.5, 0.25).unwrap(),
        ..RunConfig::default()
    };
    let out = train(&cfg).unwrap();
    let phases: Vec<(Modality, Phase, usize)> = out.history.iter().map(|h| (h.stream, h.phase, h.epoch)).collect();
    assert_eq!(phases.len(), 10);
    assert_eq!(phases[0], (Modality::Joint, Phase::Expert, 0));
    assert_eq!(phases[2], (Modality::Joint, Phase::Joint, 0));
    assert_eq!(phases[5], (Modality::Bone, Phase::Expert, 0));
    assert_eq!(out.checkpoint.loss_weights, cfg.loss_weights);
    let lr: Vec<f64> = out.history[2..5].iter().map(|h| h.learning_rate).collect();
    assert_eq!(lr[0], cfg.learning_rate);
    assert!(out.metrics.streams.contains_key("joint.expert_only"));
    assert!(out.metrics.streams.contains_key("bone"));
}

#[test]
fn exploding_step_size_reports_divergence() {
    let cfg = RunConfig {
        model: tiny_model(Variant::ScoreFusion, 2),
        data: DataSource::Synth { spec: two_class_spec(), seed: 3 },
        epochs: 20,
        cold_start: true,
        batch_size: 4,
        learning_rate: 1e200,
        momentum: 0.0,
        ..RunConfig::default()
    };
    let err = train(&cfg).unwrap_err();
    assert_eq!(err.category(), "divergence");
    assert!(err.to_string().contains("epoch"), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = RunConfig { model: tiny_model(Variant::Pam, 3), ..RunConfig::default() };
    assert_eq!(train(&cfg).unwrap_err().category(), "validation");
    cfg.model.num_classes = 12;
    cfg.streams = vec![Modality::Joint, Modality::Joint];
    assert!(cfg.validate().is_err());
    cfg.streams.clear();
    assert!(cfg.validate().is_err());
    assert!(RunConfig::from_json(r#"{"batch_size": 0}"#).is_err());
    assert!(RunConfig::from_json(r#"{"model": {"variant": "nope"}}"#).is_err());
    let parsed = RunConfig::from_json(r#"{"epochs": 4, "streams": ["joint", "bone"]}"#).unwrap();
    assert_eq!((parsed.epochs, parsed.streams.len(), parsed.batch_size), (4, 2, 16));
}

#[test]
fn constant_predictor_scores_one_in_twelve() {
    let spec = SynthSpec { per_class_train: 1, per_class_test: 3, frames: 10, ..SynthSpec::default() };
    let test = synth_generate(&spec, 9).unwrap().test;
    let cfg = tiny_model(Variant::ScoreFusion, 12);
    let mut model = Model::init(cfg, 1).unwrap();
    for s in ["body", "hand"] {
        let w = model.store_mut().get_mut(&format!("{s}.fc.W")).unwrap();
        *w = Tensor::zeros(w.shape());
        let mut b = vec![0.0; 12];
        b[5] = 1.0;
        *model.store_mut().get_mut(&format!("{s}.fc.b")).unwrap() = Tensor::new(&[12], b).unwrap();
    }
    let ck = Checkpoint::new(&[(Modality::Joint, &model)], LossWeights::default()).unwrap();
    let m = evaluate(&ck, &test, &[Modality::Joint]).unwrap();
    assert_eq!(m.accuracy, 3.0 / 36.0);
    assert_eq!(m.per_class[5], Some(1.0));
    assert!(m.confusion.iter().all(|row| row.iter().enumerate().all(|(j, &c)| j == 5 || c == 0)));
    assert_eq!(evaluate(&ck, &test, &[Modality::Bone]).unwrap_err().category(), "validation");
}

#[test]
fn perfect_predictor_scores_one() {
    let labels = vec![0, 2, 1, 1, 2, 0];
    let rows: Vec<Vec<f64>> = labels.iter().map(|&l| (0..3).map(|k| if k == l { 4.0 } else { -1.0 }).collect()).collect();
    let logits = Logits::from_rows(&rows).unwrap();
    let mut streams = BTreeMap::new();
    streams.insert("joint".to_string(), StreamScore::from_logits(&logits, &labels).unwrap());
    let m = Metrics::from_logits(&logits, &labels, streams).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert!(m.per_class.iter().all(|&a| a == Some(1.0)));
    assert_eq!(m.stream_accuracy("joint"), Some(1.0));
}
