use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use otters_core::converter::convert_model;
use otters_core::engine::run_model;
use otters_core::rng::rng_from_seed;
use otters_core::synth::{random_codes, random_mlp, random_transformer};
use otters_core::{ConversionConfig, DecayModel, EngineMode, NoiseSpec, NoiseTarget};

fn mlp(c: &mut Criterion) {
    let mut rng = rng_from_seed(1);
    let q = random_mlp(&mut rng, &[64, 64, 64, 10], 4).unwrap();
    let o = convert_model(&q, &ConversionConfig::new(4), &DecayModel::DEVICE).unwrap();
    let x = random_codes(&mut rng, 32, 64, &q.input_quant);
    c.bench_function("mlp_64x64x64x10_32_samples_physical", |b| {
        b.iter(|| run_model(black_box(&o), black_box(&x), &EngineMode::physical()).unwrap())
    });
    let noisy = EngineMode::physical().with_noise(NoiseSpec::new(0.1, NoiseTarget::DecayOutput, 3).unwrap());
    c.bench_function("mlp_64x64x64x10_32_samples_decay_noise", |b| {
        b.iter(|| run_model(black_box(&o), black_box(&x), &noisy).unwrap())
    });
}

fn attention(c: &mut Criterion) {
    for kv_bits in [1, 4] {
        let mut rng = rng_from_seed(2);
        let q = random_transformer(&mut rng, 32, 4, 8, kv_bits, 4, 4).unwrap();
        let o = convert_model(&q, &ConversionConfig::new(4), &DecayModel::DEVICE).unwrap();
        let x = random_codes(&mut rng, 16, 32, &q.input_quant);
        c.bench_function(&format!("transformer_d32_h4_s16_kv{kv_bits}"), |b| {
            b.iter(|| run_model(black_box(&o), black_box(&x), &EngineMode::ideal()).unwrap())
        });
    }
}

criterion_group!(benches, mlp, attention);
criterion_main!(benches);
