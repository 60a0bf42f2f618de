use approx::assert_abs_diff_eq;
use bharnet::data::{dataset_from_str, dataset_to_string, derive_bone, pad_hand_layout, resample_temporal, Dataset, PersonTrack, SkeletonSample};
use bharnet::graph::{GraphTopology, LayoutKind};
use bharnet::harness::metrics::{confusion_matrix, trace};
use bharnet::harness::{count_cost, ensemble_streams, Inference};
use bharnet::model::{cross_entropy, Logits, ModelConfig, Variant};
use bharnet::Tensor;
use proptest::prelude::*;

fn track(frames: usize, nodes: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, frames * nodes * 3).prop_map(move |d| Tensor::new(&[frames, nodes, 3], d).unwrap())
}

fn logits(n: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, k), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bones_ignore_translation(t in track(4, 25), dx in -10.0f64..10.0, dy in -10.0f64..10.0, dz in -10.0f64..10.0) {
        let topo = GraphTopology::build(LayoutKind::Body25);
        let off = [dx, dy, dz];
        let moved = Tensor::from_fn(&[4, 25, 3], |ix| t.at(ix) + off[ix[2]]);
        let a = derive_bone(&t, &topo).unwrap();
        let b = derive_bone(&moved, &topo).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-13);
        }
    }

    #[test]
    fn padding_keeps_real_nodes(t in track(3, 21)) {
        let (padded, dummy) = pad_hand_layout(&t).unwrap();
        prop_assert_eq!(padded.shape(), &[3, 25, 3]);
        prop_assert_eq!(dummy.iter().filter(|&&d| d).count(), 4);
        for f in 0..3 {
            for v in 0..25 {
                for c in 0..3 {
                    let expect = if v < 21 { t.at(&[f, v, c]) } else { 0.0 };
                    prop_assert_eq!(padded.at(&[f, v, c]), expect);
                }
            }
        }
    }

    #[test]
    fn resampling_to_same_length_is_identity(frames in 2usize..9, seed in any::<u64>()) {
        let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let t = Tensor::randn(&[frames, 25, 3], &mut r);
        prop_assert_eq!(resample_temporal(&t, frames).unwrap(), t);
    }

    #[test]
    fn dataset_text_round_trip(body in track(3, 25), left in track(3, 21), right in track(3, 21), label in 0usize..3) {
        let person = PersonTrack { body, left_hand: left, right_hand: right };
        let d = Dataset::new(3, vec![SkeletonSample { label, persons: vec![person.clone(), person] }]).unwrap();
        let text = dataset_to_string(&d).unwrap();
        let back = dataset_from_str(&text).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(dataset_to_string(&back).unwrap(), text);
    }

    #[test]
    fn cross_entropy_is_shift_invariant(rows in logits(4, 5), c in -50.0f64..50.0) {
        let labels = [0, 1, 4, 2];
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x + c).collect()).collect();
        let a = cross_entropy(&Logits::from_rows(&rows).unwrap(), &labels).unwrap();
        let b = cross_entropy(&Logits::from_rows(&shifted).unwrap(), &labels).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn ensemble_matches_mean_then_argmax(a in logits(6, 4), b in logits(6, 4), c in logits(6, 4)) {
        let ls: Vec<Logits> = [&a, &b, &c].iter().map(|r| Logits::from_rows(r).unwrap()).collect();
        let fused = ensemble_streams(&ls.iter().collect::<Vec<_>>()).unwrap();
        for n in 0..6 {
            let mean: Vec<f64> = (0..4).map(|k| (a[n][k] + b[n][k] + c[n][k]) / 3.0).collect();
            for k in 0..4 {
                assert_abs_diff_eq!(fused.row(n)[k], mean[k], epsilon = 1e-12);
            }
            let best = (0..4).fold(0, |best, k| if mean[k] > mean[best] { k } else { best });
            prop_assert_eq!(fused.predictions()[n], best);
        }
    }

    #[test]
    fn confusion_rows_are_supports(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..40)) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = confusion_matrix(&preds, &labels, 5).unwrap();
        for k in 0..5 {
            prop_assert_eq!(cm[k].iter().sum::<usize>(), labels.iter().filter(|&&l| l == k).count());
        }
        let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        prop_assert_eq!(trace(&cm), hits);
    }

    #[test]
    fn cost_never_drops_when_dimensions_grow(
        variant in prop::sample::select(Variant::ALL.to_vec()),
        grow in 0usize..4,
        width in 1usize..16,
    ) {
        let base = ModelConfig { variant, frames: 16, ..ModelConfig::default() };
        let mut bigger = base.clone();
        match grow {
            0 => *bigger.backbone.channels.last_mut().unwrap() += width,
            1 => bigger.frames += width,
            2 => bigger.random_features += width,
            _ => bigger.layout = bharnet::model::GraphLayout::Path { nodes: 25 + width },
        }
        if grow == 3 {
            let small = ModelConfig { layout: bharnet::model::GraphLayout::Path { nodes: 25 }, ..base.clone() };
            let a = count_cost(&small, Inference::Full).unwrap();
            let b = count_cost(&bigger, Inference::Full).unwrap();
            prop_assert!(b.flops >= a.flops);
        } else {
            for inf in [Inference::Full, Inference::ExpertOnly] {
                let a = count_cost(&base, inf).unwrap();
                let b = count_cost(&bigger, inf).unwrap();
                prop_assert!(b.flops >= a.flops);
                prop_assert_eq!(a.flops, a.breakdown.values().map(|c| c.flops).sum::<u64>());
            }
        }
    }
}

#[test]
fn cost_params_match_initialized_models() {
    for v in Variant::ALL {
        let cfg = ModelConfig { variant: v, ..ModelConfig::default() };
        let model = bharnet::model::Model::init(cfg.clone(), 0).unwrap();
        let report = count_cost(&cfg, Inference::Full).unwrap();
        assert_eq!(report.params as usize, model.store().parameter_count(), "{v:?}");
    }
}
