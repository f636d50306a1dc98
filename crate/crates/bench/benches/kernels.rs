use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use switchdiff::averaging;
use switchdiff::fastchain;
use switchdiff::ratefn::{self, LocalRateOptions};
use switchdiff::simulator::{self, SimSpec};
use switchdiff::StreamId;
use switchdiff_bench::{random_model, reference};

fn stationary(c: &mut Criterion) {
    let mut g = c.benchmark_group("stationary");
    for l in [2, 4, 6] {
        let model = random_model(l, 2);
        g.bench_with_input(BenchmarkId::new("nu", l), &model, |b, m| {
            b.iter(|| fastchain::nu(m, black_box(&[0.3, -0.2])).unwrap())
        });
    }
    g.finish();
}

fn local_rate(c: &mut Criterion) {
    let model = reference();
    let opts = LocalRateOptions::default();
    c.bench_function("local_rate/reference", |b| {
        b.iter(|| ratefn::local_rate(&model, black_box(&[0.4]), black_box(&[0.7]), &opts).unwrap())
    });
    let three = random_model(3, 1);
    c.bench_function("local_rate/three_state", |b| {
        b.iter(|| ratefn::local_rate(&three, black_box(&[0.1]), black_box(&[0.5]), &opts).unwrap())
    });
}

fn simulation(c: &mut Criterion) {
    let model = reference();
    let mut g = c.benchmark_group("simulate");
    for eps in [0.1, 0.01] {
        let spec = SimSpec::new(eps, vec![0.5], 0, 1.0, 0.01);
        g.bench_with_input(BenchmarkId::new("trajectory", eps), &spec, |b, s| {
            b.iter(|| simulator::simulate(&model, s, StreamId::new(1, 1)).unwrap())
        });
    }
    let spec = SimSpec::new(0.03, vec![0.5], 0, 1.0, 0.01);
    g.sample_size(20);
    g.bench_function("ensemble_256", |b| {
        b.iter(|| simulator::batch_simulate(&model, &spec, 256, 7, None, None).unwrap())
    });
    g.finish();
}

fn averaged_ode(c: &mut Criterion) {
    let model = random_model(4, 2);
    c.bench_function("averaged_ode/l4_d2", |b| {
        b.iter(|| averaging::solve_averaged_ode(&model, black_box(&[0.1, 0.2]), 1.0, 0.01).unwrap())
    });
}

criterion_group!(benches, stationary, local_rate, simulation, averaged_ode);
criterion_main!(benches);
