use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use loo_certify::{grad_analytic, grad_fd, Estimator, Loss};
use loo_certify_bench::{linear_data, query};

fn gradients(c: &mut Criterion) {
    let d = linear_data(128, 4);
    let z = query();
    let estimators = [
        ("ols", Estimator::OlsSimple),
        (
            "nw",
            Estimator::NwStabilized {
                bandwidth: 0.1,
                stabilizer: 0.01,
            },
        ),
    ];
    let mut group = c.benchmark_group("gradient");
    for (name, est) in estimators {
        group.bench_function(format!("{name}_analytic"), |b| {
            b.iter(|| grad_analytic(&est, Loss::Squared, black_box(&d), z.as_ref()).unwrap())
        });
        group.bench_function(format!("{name}_fd"), |b| {
            b.iter(|| grad_fd(&est, Loss::Squared, black_box(&d), z.as_ref(), 1e-5).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gradients);
criterion_main!(benches);
