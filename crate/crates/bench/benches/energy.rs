use criterion::{criterion_group, criterion_main, Criterion};
use metreg::kernels::MultiGaussianSpec;
use metreg::regressor::{RegressorConfig, RegressorParams};
use metreg::vsvf::{energy_gradient, EnergyParams, Stage};
use metreg_bench::task;

fn gradients(c: &mut Criterion) {
    let spec = MultiGaussianSpec::default();
    let params = EnergyParams::default();
    let theta = RegressorParams::init(RegressorConfig::new(spec.n()), 0).unwrap();
    let t = task(128);
    let mut group = c.benchmark_group("energy_gradient_128");
    group.sample_size(20);
    for stage in [Stage::Global, Stage::Local] {
        group.bench_function(format!("{stage:?}"), |b| {
            b.iter(|| energy_gradient(&t, Some(&theta), &spec, &params, stage, true).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gradients);
criterion_main!(benches);
