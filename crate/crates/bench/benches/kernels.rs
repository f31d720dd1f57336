use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ghaar::compressed::{haar_conv_step, OpCounter};
use ghaar::haar_space::{enumerate_space, nearest_filter, SignPattern};
use ghaar_bench::{random_vec, rng};

fn conv_step(c: &mut Criterion) {
    let mut r = rng(1);
    let patch = random_vec(&mut r, 9);
    let pattern = SignPattern::from_index(3, 0b1011_0010).unwrap();
    let weights = pattern.scaled(0.37);
    let mut g = c.benchmark_group("conv_step_3x3");
    g.bench_function("haar", |b| {
        let mut counter = OpCounter::new();
        b.iter(|| haar_conv_step(&pattern, black_box(&patch), black_box(0.37), &mut counter).unwrap())
    });
    g.bench_function("dense", |b| {
        b.iter(|| {
            black_box(&weights)
                .iter()
                .zip(black_box(&patch))
                .map(|(w, x)| w * x)
                .sum::<f64>()
        })
    });
    g.finish();
}

fn projection(c: &mut Criterion) {
    let mut r = rng(2);
    let kernels: Vec<Vec<f64>> = (0..64).map(|_| random_vec(&mut r, 9)).collect();
    let space = enumerate_space(3).unwrap();
    c.bench_function("nearest_filter_3x3_x64", |b| {
        b.iter(|| {
            for k in &kernels {
                black_box(nearest_filter(k, &space).unwrap());
            }
        })
    });
}

criterion_group!(benches, conv_step, projection);
criterion_main!(benches);
