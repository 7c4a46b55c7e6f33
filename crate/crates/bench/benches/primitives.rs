use criterion::{criterion_group, criterion_main, Criterion};
use dualcloak_bench::{fixture_model, subject};
use dualcloak_core::colorspace::{lab_to_rgb_tensor, rgb_to_lab_tensor};
use dualcloak_core::eval::{jpeg_like, ssim};
use dualcloak_core::frequency::{dct2, idct2};
use dualcloak_core::Tape;
use std::hint::black_box;

fn transforms(c: &mut Criterion) {
    let model = fixture_model();
    let (x, _, _) = subject(&model, 1000);
    let (y, _, _) = subject(&model, 1001);

    c.bench_function("dct2_idct2_32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let v = tape.constant(x.clone());
            black_box(idct2(&dct2(&v).unwrap()).unwrap().value())
        })
    });
    c.bench_function("lab_round_trip_32", |b| b.iter(|| black_box(lab_to_rgb_tensor(&rgb_to_lab_tensor(&x).unwrap()).unwrap())));
    c.bench_function("jpeg_like_q40", |b| b.iter(|| black_box(jpeg_like(&x, 40).unwrap())));
    c.bench_function("ssim_32", |b| b.iter(|| black_box(ssim(&x, &y).unwrap())));
}

fn encoder(c: &mut Criterion) {
    let model = fixture_model();
    let (x, _, _) = subject(&model, 1000);
    c.bench_function("encode_32", |b| b.iter(|| black_box(model.encode(&x).unwrap())));
}

criterion_group!(benches, transforms, encoder);
criterion_main!(benches);
