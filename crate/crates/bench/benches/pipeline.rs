use criterion::{criterion_group, criterion_main, Criterion};
use gt360_bench::{desk_fixture, heatmap_fixture};
use gt360_core::eval::{average_precision, heatmap_auc, AucPositives};
use gt360_core::pipeline::classify;
use gt360_core::PipelineConfig;
use std::hint::black_box;

fn model(c: &mut Criterion) {
    let (model, features, head) = desk_fixture();
    let fused = model.fuse(&features).unwrap();
    c.bench_function("fuse_desk", |b| {
        b.iter(|| model.fuse(black_box(&features)).unwrap())
    });
    c.bench_function("decode_desk", |b| {
        b.iter(|| model.decode(black_box(&fused), &head).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let hm = heatmap_fixture();
    c.bench_function("heatmap_auc_gaussian", |b| {
        b.iter(|| heatmap_auc(black_box(&hm), (0.3, 0.6), AucPositives::Gaussian).unwrap())
    });
    let scores: Vec<(f64, bool)> = (0..10_000)
        .map(|i| ((i * 7919 % 1000) as f64, i % 3 == 0))
        .collect();
    c.bench_function("average_precision_10k", |b| {
        b.iter(|| average_precision(black_box(&scores)).unwrap())
    });
    let cfg = PipelineConfig::default();
    c.bench_function("classify_1k", |b| {
        b.iter(|| {
            (0..1000)
                .map(|i| classify(i as f64 / 1000.0, 0.5, &cfg) as usize)
                .sum::<usize>()
        })
    });
}

criterion_group!(benches, model, metrics);
criterion_main!(benches);
