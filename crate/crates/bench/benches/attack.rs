use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dualcloak_bench::{fixture_model, subject};
use dualcloak_core::attack::{dsp_optimize, pgd_rgb, AttackConfig, Space};
use std::hint::black_box;

// A handful of iterations is enough to measure the per-step cost.
const ITERS: usize = 5;

fn per_space(c: &mut Criterion) {
    let model = fixture_model();
    let (x, reference, y) = subject(&model, 1000);
    let mut group = c.benchmark_group("dsp_5_iters");
    group.sample_size(10);
    for space in Space::ALL {
        let cfg = AttackConfig { space, iters: ITERS, ..Default::default() };
        group.bench_with_input(BenchmarkId::from_parameter(space.name()), &cfg, |b, cfg| {
            b.iter(|| black_box(dsp_optimize(&x, &reference, y, &model, cfg).unwrap()))
        });
    }
    group.finish();

    let cfg = AttackConfig { iters: ITERS, ..Default::default() };
    let mut group = c.benchmark_group("pgd_5_iters");
    group.sample_size(10);
    group.bench_function("rgb", |b| b.iter(|| black_box(pgd_rgb(&x, &reference, y, &model, &cfg).unwrap())));
    group.finish();
}

criterion_group!(benches, per_space);
criterion_main!(benches);
