use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use treesr_bench::fixture;
use treesr_core::arch::Tape;
use treesr_core::diff::LossEvaluator;
use treesr_core::{build_architecture, enumerate_expressible, run_trial, Family, Operator, Penalties, TrainConfig};

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("pass");
    for family in Family::ALL {
        let f = fixture(family, "T1(xy)");
        let mut tape = Tape::for_spec(&f.spec);
        let mut grad = vec![0.0; f.spec.param_count()];
        group.bench_function(BenchmarkId::new("point", family.name()), |b| {
            b.iter(|| {
                f.spec.selector_weights_into(&f.params, 2.5, &mut tape.weights);
                let v = f.spec.forward_with_weights(black_box(0.7), black_box(-1.2), &mut tape);
                f.spec.backward(0.7, -1.2, 2.5, 1.0, &mut grad, &mut tape);
                v.ok()
            })
        });
        let mut ev = LossEvaluator::new(&f.spec);
        group.bench_function(BenchmarkId::new("dataset", family.name()), |b| {
            b.iter(|| ev.evaluate(black_box(&f.params), 2.5, &f.data, Penalties { weight: 0.05 }).map(|o| o.loss).ok())
        });
    }
    group.finish();
}

fn short_trial(c: &mut Criterion) {
    let f = fixture(Family::V16, "T1(xy)");
    let config = TrainConfig { search_iters: 150, harden_iters: 50, verify_points: 100, ..TrainConfig::default() };
    let mut group = c.benchmark_group("trial");
    group.sample_size(10);
    group.bench_function("v16_200_steps", |b| b.iter(|| run_trial(&f.spec, &f.data, black_box(&config)).ok()));
    group.finish();
}

fn enumeration(c: &mut Criterion) {
    let spec = build_architecture(Family::Eq6, 2, Operator::Eml).unwrap();
    c.bench_function("enumerate_eq6_depth2", |b| b.iter(|| enumerate_expressible(black_box(&spec)).map(|s| s.len()).ok()));
}

criterion_group!(benches, forward_backward, short_trial, enumeration);
criterion_main!(benches);
