//! Sequential against data-parallel execution of the hot kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use steer_core::bridge::{fixed_point, FixedPointOptions, KernelOperator};
use steer_core::density::{discretize, GaussianMixture, Grid, WeightedCloud};
use steer_core::par::Exec;

fn cloud(mean: [f64; 2], nodes: usize) -> WeightedCloud {
    let g = Grid::uniform(&[(-1.6, 1.6), (-1.6, 1.6)], &[nodes, nodes]).unwrap();
    let mix =
        GaussianMixture::diagonal(vec![1.0], vec![mean.to_vec()], vec![vec![0.05, 0.04]]).unwrap();
    WeightedCloud::from_grid(&discretize(&mix, &g, true).unwrap().0)
}

fn kernels(c: &mut Criterion) {
    let (a, b) = (cloud([-0.4, 0.2], 31), cloud([0.4, -0.1], 31));
    let log_h: Vec<f64> = vec![0.0; b.len()];
    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for exec in [Exec::Seq, Exec::Par] {
        let name = format!("{exec:?}");
        group.bench_function(BenchmarkId::new("build", &name), |bench| {
            bench.iter(|| KernelOperator::brownian(&a, &b, 0.01, 0.0, 1.0, exec).unwrap())
        });
        let k = KernelOperator::brownian(&a, &b, 0.01, 0.0, 1.0, exec).unwrap();
        group.bench_function(BenchmarkId::new("log_apply", &name), |bench| {
            bench.iter(|| k.log_apply(&log_h, exec))
        });
        let opts = FixedPointOptions {
            tol: 1e-8,
            exec,
            ..FixedPointOptions::default()
        };
        group.bench_function(BenchmarkId::new("fixed_point", &name), |bench| {
            bench.iter(|| fixed_point(&k, &a.values, &b.values, &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
