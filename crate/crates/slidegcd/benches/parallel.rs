//! Sequential vs data-parallel kernels: dense matmul, sparse propagation,
//! and kNN graph construction.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slidegcd::matrix::{matmul_seq, Matrix};
use slidegcd::slidegraph::{build_graph, hyper_propagator};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [64usize, 128, 256] {
        let a = Matrix::randn(n, n, 1.0, &mut rng);
        let b = Matrix::randn(n, n, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |bch, _| {
            bch.iter(|| matmul_seq(&a, &b))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", n), &n, |bch, _| {
            bch.iter(|| slidegcd::matrix::matmul_par(&a, &b))
        });
    }
    group.finish();
}

fn bench_sparse_apply(c: &mut Criterion) {
    let mut group = c.benchmark_group("sparse_apply");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [256usize, 1024] {
        let x0 = Matrix::randn(n, 16, 1.0, &mut rng);
        let graph = build_graph(&x0, &Matrix::identity(16), 8).unwrap();
        let prop = hyper_propagator(&graph.hyperedges, n).unwrap();
        let x = Matrix::randn(n, 64, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |bch, _| {
            bch.iter(|| prop.apply_seq(&x))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", n), &n, |bch, _| {
            bch.iter(|| prop.apply(&x))
        });
    }
    group.finish();
}

fn bench_build_graph(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_graph");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [128usize, 512] {
        let x0 = Matrix::randn(n, 32, 1.0, &mut rng);
        let w_p = Matrix::randn(32, 8, 0.2, &mut rng);
        group.bench_with_input(BenchmarkId::new("knn", n), &n, |bch, _| {
            bch.iter(|| build_graph(&x0, &w_p, 12).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_sparse_apply, bench_build_graph);
criterion_main!(benches);
