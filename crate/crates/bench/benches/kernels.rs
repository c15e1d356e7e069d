use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use metreg::field::Grid;
use metreg::kernels::{localized_smooth, multi_gaussian_smooth, LocalWeights, MultiGaussianSpec};
use metreg::vsvf::advect_inverse_map;
use metreg_bench::swirl;

fn smoothing(c: &mut Criterion) {
    let spec = MultiGaussianSpec::default();
    let mut group = c.benchmark_group("smoothing");
    for n in [64, 128] {
        let grid = Grid::square(n).unwrap();
        let m = swirl(grid, 1.0);
        let lw = LocalWeights::constant(grid, &spec.setpoint_weights, &spec).unwrap();
        group.bench_with_input(BenchmarkId::new("multi_gaussian", n), &m, |b, m| {
            b.iter(|| multi_gaussian_smooth(black_box(m), &spec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("localized", n), &m, |b, m| {
            b.iter(|| localized_smooth(black_box(m), &lw, &spec).unwrap())
        });
    }
    group.finish();
}

fn advection(c: &mut Criterion) {
    let v = swirl(Grid::square(64).unwrap(), 1.0);
    c.bench_function("advect_rk4_20_steps_64", |b| b.iter(|| advect_inverse_map(black_box(&v), 20).unwrap()));
}

criterion_group!(benches, smoothing, advection);
criterion_main!(benches);
