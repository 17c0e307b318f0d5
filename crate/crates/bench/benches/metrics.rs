use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pcc_core::geometry::farthest_point_sample;
use pcc_core::metrics::{chamfer_brute, chamfer_indexed, emd_approx, emd_exact, DEFAULT_AUCTION_EPS};
use pcc_core::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::canonical(
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect(),
    )
    .unwrap()
}

fn chamfer(c: &mut Criterion) {
    let mut group = c.benchmark_group("chamfer");
    for n in [256, 2048] {
        let (a, b) = (cloud(n, 1), cloud(n, 2));
        group.bench_with_input(BenchmarkId::new("indexed", n), &n, |bench, _| bench.iter(|| chamfer_indexed(&a, &b).unwrap()));
        group.bench_with_input(BenchmarkId::new("brute", n), &n, |bench, _| bench.iter(|| chamfer_brute(&a, &b).unwrap()));
    }
    group.finish();
}

fn emd(c: &mut Criterion) {
    let mut group = c.benchmark_group("emd");
    group.sample_size(10);
    let (a, b) = (cloud(256, 3), cloud(256, 4));
    group.bench_function("hungarian/256", |bench| bench.iter(|| emd_exact(&a, &b).unwrap()));
    for eps in [DEFAULT_AUCTION_EPS, 1e-2] {
        group.bench_with_input(BenchmarkId::new("auction/256", eps), &eps, |bench, &eps| {
            bench.iter(|| emd_approx(&a, &b, eps, 50_000_000).unwrap())
        });
    }
    group.finish();
}

fn fps(c: &mut Criterion) {
    let big = cloud(8192, 5);
    c.bench_function("fps/8192->2048", |bench| bench.iter(|| farthest_point_sample(&big, 2048).unwrap()));
}

criterion_group!(benches, chamfer, emd, fps);
criterion_main!(benches);
