use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dyngraph_ood::encoder::{Model, ModelConfig};
use dyngraph_ood::graph::windows_in;
use dyngraph_ood::oodgen::{make_ood_testset, OodKind, SbmSpec};
use dyngraph_ood::par::Execution;
use dyngraph_ood::spectral::{negative_window, AugmentMode, SpectralCache};
use dyngraph_ood::synthetic::{generate, SyntheticSpec};
use dyngraph_ood::train::score_sequence;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn sequence(nodes: usize) -> dyngraph_ood::graph::DynamicGraphSequence {
    generate(&SyntheticSpec {
        num_nodes: nodes,
        timesteps: 16,
        ..Default::default()
    })
    .unwrap()
}

fn window_scoring(c: &mut Criterion) {
    let seq = sequence(200);
    let cfg = ModelConfig {
        input_dim: seq.feature_dim(),
        hidden_dims: vec![32, 32],
        num_classes: 2,
        head: Default::default(),
        pair_rule: Default::default(),
    };
    let model = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut g = c.benchmark_group("score_windows");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| score_sequence(black_box(&model), &seq, 3, 10.0, exec).unwrap())
        });
    }
    g.finish();
}

fn eigendecompositions(c: &mut Criterion) {
    let seq = sequence(150);
    let windows = windows_in(&seq, 0, seq.total_timesteps(), 8).unwrap();
    let mut g = c.benchmark_group("negative_windows");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let cache = SpectralCache::default();
                for w in &windows {
                    black_box(negative_window(w, 0.3, AugmentMode::Verbatim, &cache, exec).unwrap());
                }
            })
        });
    }
    g.finish();
}

fn ood_generation(c: &mut Criterion) {
    let seq = sequence(300);
    let kind = OodKind::Sm(SbmSpec::default());
    let mut g = c.benchmark_group("sm_generation");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| make_ood_testset(black_box(&seq), &kind, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, window_scoring, eigendecompositions, ood_generation);
criterion_main!(benches);
