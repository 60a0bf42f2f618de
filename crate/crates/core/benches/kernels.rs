//! Sequential versus data-parallel execution of the hot kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bharnet::attention::fast_attention;
use bharnet::data::{synth_generate, Modality, SynthSpec};
use bharnet::exec;
use bharnet::graph::{normalize_adjacency, spatial_graph_conv, temporal_conv, GraphTopology, LayoutKind, Partition};
use bharnet::harness::train::prepare;
use bharnet::model::{Model, ModelConfig, Variant};
use bharnet::Tensor;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let adj = normalize_adjacency(&GraphTopology::build(LayoutKind::Body25), Partition::Distance);
    let x = Tensor::randn(&[16, 16, 32, 2, 25], &mut rng);
    let w = Tensor::randn(&[3, 16, 32], &mut rng);
    let k = Tensor::randn(&[32, 32, 5], &mut rng);
    let y = spatial_graph_conv(&x, &adj, &w).unwrap();
    let q = Tensor::uniform(&[400, 32], 1.0, &mut rng);

    let mut g = c.benchmark_group("kernels");
    for (name, parallel) in MODES {
        exec::set_parallel(parallel);
        g.bench_function(BenchmarkId::new("graph_conv", name), |b| b.iter(|| spatial_graph_conv(&x, &adj, &w).unwrap()));
        g.bench_function(BenchmarkId::new("temporal_conv", name), |b| b.iter(|| temporal_conv(&y, &k, 2).unwrap()));
        g.bench_function(BenchmarkId::new("fast_attention", name), |b| b.iter(|| fast_attention(&q, &q, &q, 64, 1).unwrap()));
    }
    g.finish();
    exec::set_parallel(true);
}

fn pipeline(c: &mut Criterion) {
    let spec = SynthSpec { per_class_train: 4, per_class_test: 1, ..SynthSpec::default() };
    let data = synth_generate(&spec, 7).unwrap().train;
    let config = ModelConfig { variant: Variant::Pam, ..ModelConfig::default() };
    let model = Model::init(config.clone(), 0).unwrap();
    let pair = prepare(&data, Modality::Joint, &config).unwrap();

    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    for (name, parallel) in MODES {
        exec::set_parallel(parallel);
        g.bench_function(BenchmarkId::new("synth_generate", name), |b| b.iter(|| synth_generate(&spec, 7).unwrap()));
        g.bench_function(BenchmarkId::new("prepare_streams", name), |b| {
            b.iter(|| prepare(&data, Modality::Joint, &config).unwrap())
        });
        g.bench_function(BenchmarkId::new("predict_pam", name), |b| {
            b.iter(|| model.predict(&pair.body.data, &pair.hand.data, 8).unwrap())
        });
    }
    g.finish();
    exec::set_parallel(true);
}

criterion_group!(benches, kernels, pipeline);
criterion_main!(benches);
