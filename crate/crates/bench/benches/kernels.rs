use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mog_core::eval::{iou_aabb, match_predictions, Box3D};
use mog_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    Box3D {
        centroid: [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), rng.random_range(0.0..1.0)],
        size: [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)],
    }
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("matmul");
    for &(m, k, n) in &[(12, 64, 64), (12, 64, 256), (384, 64, 64)] {
        let a = random(&mut rng, m, k);
        let b = random(&mut rng, k, n);
        group.bench_with_input(BenchmarkId::new("forward", format!("{m}x{k}x{n}")), &(), |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let y = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
                black_box(y.value());
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", format!("{m}x{k}x{n}")), &(), |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let x = tape.param(a.clone());
                let w = tape.param(b.clone());
                let loss = x.matmul(w).unwrap().sum();
                tape.backward(loss).unwrap();
                black_box(w.grad());
            })
        });
    }
    group.finish();
}

fn matching(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_box(&mut rng);
    let b = random_box(&mut rng);
    c.bench_function("iou_aabb", |bench| bench.iter(|| iou_aabb(black_box(&a), black_box(&b))));
    let mut group = c.benchmark_group("greedy_matching");
    for &n in &[4usize, 16] {
        let preds: Vec<Box3D> = (0..n).map(|_| random_box(&mut rng)).collect();
        let gts: Vec<Box3D> = (0..n).map(|_| random_box(&mut rng)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| match_predictions(black_box(&preds), black_box(&gts), 0.5))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, matching);
criterion_main!(benches);
