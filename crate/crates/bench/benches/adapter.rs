use criterion::{criterion_group, criterion_main, Criterion};
use hierloss::trainer::{generate_synthetic, init_model};
use hierloss::{SynthSpec, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench(c: &mut Criterion) {
    let data = generate_synthetic(&SynthSpec::default()).unwrap();
    let config = TrainConfig::default();
    let model = init_model(&config, &data, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = data.train.features.row(0);
    c.bench_function("adapter forward", |b| {
        b.iter(|| model.adapter.forward(black_box(x)).unwrap())
    });
    let idx: Vec<usize> = (0..config.batch_size).collect();
    c.bench_function("batch loss and grad", |b| {
        b.iter(|| model.loss_and_grad(black_box(&data.train), &idx).unwrap())
    });
}

criterion_group!(benches, bench);
criterion_main!(benches);
