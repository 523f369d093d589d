use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use meatlab::analysis::{landscape_grid_with, LandscapeConfig};
use meatlab::diffnet::{loss_xent, Model, ModelSpec, NamedParams};
use meatlab::ensemble::median_params;
use meatlab::numcore::RngState;
use meatlab::Exec;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn bench_matmul(c: &mut Criterion) {
    let mut rng = RngState::new(1);
    let a = rng.gaussian(&[512, 256]);
    let b = rng.gaussian(&[256, 256]);
    let mut group = c.benchmark_group("matmul_512x256x256");
    for (name, exec) in MODES {
        group.bench_function(name, |bench| {
            bench.iter(|| a.matmul_with(black_box(&b), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_median(c: &mut Criterion) {
    let mut group = c.benchmark_group("median_params");
    for n in [5usize, 15, 31] {
        let mut rng = RngState::new(n as u64);
        let model = Model::init(ModelSpec::mlp(32, &[256, 256], 10, true), &mut rng).unwrap();
        let snaps: Vec<NamedParams> = (0..n)
            .map(|_| {
                let noise: Vec<_> = model
                    .params
                    .tensors()
                    .map(|t| rng.gaussian(t.shape()).scale(0.01))
                    .collect();
                model
                    .params
                    .zip_with(&model.params.with_tensors(noise).unwrap(), |a, b| a + b)
                    .unwrap()
            })
            .collect();
        let refs: Vec<&NamedParams> = snaps.iter().collect();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &refs, |bench, refs| {
                bench.iter(|| median_params(refs, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_landscape(c: &mut Criterion) {
    let mut rng = RngState::new(7);
    let model = Model::init(ModelSpec::default_mlp(2, 3), &mut rng).unwrap();
    let x = rng.uniform_tensor(&[256, 2], -1.0, 1.0);
    let labels: Vec<usize> = (0..256).map(|i| i % 3).collect();
    let cfg = LandscapeConfig {
        resolution: 11,
        ..LandscapeConfig::default()
    };
    let loss = |p: &NamedParams| {
        let m = Model {
            spec: model.spec.clone(),
            params: p.clone(),
            bn: model.bn.clone(),
        };
        loss_xent(&m.logits(&x)?, &labels)
    };
    let mut group = c.benchmark_group("landscape_11x11");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |bench| {
            bench.iter(|| landscape_grid_with(&model.params, &cfg, exec, loss).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_median, bench_landscape);
criterion_main!(benches);
