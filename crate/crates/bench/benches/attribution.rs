use std::hint::black_box;

use attribot_bench::{layout, model, response};
use attribot_core::{hierarchical, loo_exact, loo_kv, HierParams};
use criterion::{criterion_group, criterion_main, Criterion};

fn loo(c: &mut Criterion) {
    let model = model(2, 2, 32, 512);
    let layout = layout(4, 4);
    let response = response();
    let mut group = c.benchmark_group("loo_16_sources");
    group.sample_size(10);
    group.bench_function("exact", |b| b.iter(|| loo_exact(&model, black_box(&layout), &response).unwrap()));
    group.bench_function("kv", |b| b.iter(|| loo_kv(&model, black_box(&layout), &response).unwrap()));
    group.bench_function("hier_beta_0.25", |b| {
        b.iter(|| hierarchical(&model, black_box(&layout), &response, &HierParams::new(0.25), true).unwrap())
    });
    group.finish();
}

criterion_group!(benches, loo);
criterion_main!(benches);
