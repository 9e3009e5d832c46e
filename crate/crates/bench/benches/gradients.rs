use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dso_bench::first_exit_instance;
use dso_core::exact::exact_gradient;
use dso_core::rollout::{algorithm1_gradient, generate_rollouts, Termination};
use dso_core::surrogate::{surrogate_sampled, SurrogateObjective};

fn exact(c: &mut Criterion) {
    let mut group = c.benchmark_group("exact_gradient");
    for n in [8, 32, 128] {
        let (problem, theta) = first_exit_instance(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| exact_gradient(black_box(&problem), black_box(&theta)).unwrap())
        });
    }
    group.finish();
}

fn sampled(c: &mut Criterion) {
    let (problem, theta) = first_exit_instance(16);
    let term = Termination::Terminal { cap: 10_000 };
    c.bench_function("rollouts_1024", |b| {
        b.iter(|| generate_rollouts(&problem, &theta, 1024, term, black_box(3), Some(1)).unwrap())
    });
    let batch = generate_rollouts(&problem, &theta, 1024, term, 3, None).unwrap();
    c.bench_function("batch_gradient_1024", |b| {
        b.iter(|| algorithm1_gradient(&problem, &theta, black_box(&batch), None).unwrap())
    });
    let surrogate = surrogate_sampled(&problem, &theta, &batch, None).unwrap();
    let alpha = vec![0.01; theta.len()];
    c.bench_function("sampled_surrogate_gradient_1024", |b| {
        b.iter(|| surrogate.gradient(black_box(&alpha)).unwrap())
    });
}

criterion_group!(benches, exact, sampled);
criterion_main!(benches);
