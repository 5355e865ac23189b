use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use otters_core::decay::{build_spike_time_table, fit_decay, synthetic_samples, FitConfig};
use otters_core::DecayModel;

fn fit(c: &mut Criterion) {
    let samples = synthetic_samples(&DecayModel::DEVICE);
    let cfg = FitConfig {
        max_generations: 200,
        seed: 7,
        ..FitConfig::default()
    };
    let mut g = c.benchmark_group("decay");
    g.sample_size(20);
    g.bench_function("fit_200_generations", |b| b.iter(|| fit_decay(black_box(&samples), &cfg).unwrap()));
    g.bench_function("spike_time_table_t15", |b| {
        b.iter(|| build_spike_time_table(black_box(&DecayModel::DEVICE), 15).unwrap())
    });
    g.finish();
}

criterion_group!(benches, fit);
criterion_main!(benches);
