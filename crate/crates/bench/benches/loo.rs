use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use loo_certify::data::DataGenerator;
use loo_certify::{loo_fast, loo_naive, risk_oracle, Axis, Estimator, Loss};
use loo_certify_bench::{linear_data, sine_data};

fn loo_methods(c: &mut Criterion) {
    let mut group = c.benchmark_group("loo");
    let kde = Estimator::Kde {
        bandwidth: 0.1,
        axis: Axis::Y,
    };
    for n in [64, 256] {
        let d = sine_data(n, 1);
        group.bench_with_input(BenchmarkId::new("kde_naive", n), &d, |b, d| {
            b.iter(|| loo_naive(&kde, Loss::IdentityAbs, black_box(d)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("kde_fast", n), &d, |b, d| {
            b.iter(|| loo_fast(&kde, Loss::IdentityAbs, black_box(d)).unwrap())
        });
    }
    for n in [256, 2048] {
        let d = linear_data(n, 2);
        group.bench_with_input(BenchmarkId::new("ols_naive", n), &d, |b, d| {
            b.iter(|| loo_naive(&Estimator::OlsSimple, Loss::Absolute, black_box(d)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("ols_fast", n), &d, |b, d| {
            b.iter(|| loo_fast(&Estimator::OlsSimple, Loss::Absolute, black_box(d)).unwrap())
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let gen = DataGenerator::gaussian_linear(0.0, 5.0, 1.0).unwrap();
    let d = linear_data(1024, 3);
    let nw = Estimator::NwStabilized {
        bandwidth: 0.01,
        stabilizer: 0.01,
    };
    let mut group = c.benchmark_group("risk_oracle");
    group.sample_size(20);
    group.bench_function("ols_m10000", |b| {
        b.iter(|| risk_oracle(&Estimator::OlsSimple, Loss::Absolute, &d, &gen, 10_000, 7).unwrap())
    });
    group.bench_function("nw_m10000", |b| b.iter(|| risk_oracle(&nw, Loss::Absolute, &d, &gen, 10_000, 7).unwrap()));
    group.finish();
}

criterion_group!(benches, loo_methods, oracle);
criterion_main!(benches);
