use criterion::{criterion_group, criterion_main, Criterion};
use hierloss::losses::{build_smoothing_tables, hisce_loss, total_loss, tp_kl_loss, Epsilon, LossWeights};
use hierloss::{HierLogits, Taxonomy, TpKlMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench(c: &mut Criterion) {
    let tax = Taxonomy::balanced(&[13, 3, 5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let levels: Vec<Vec<f64>> = tax
        .level_sizes()
        .iter()
        .map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let hier = HierLogits::new(levels, 0.07).unwrap();
    let path = tax.ancestor_path(77).unwrap();
    let tables = build_smoothing_tables(&tax, &Epsilon::Global(0.1)).unwrap();
    let weights = LossWeights::new(1.0, 1.0).unwrap();

    c.bench_function("hisce 195 classes", |b| {
        b.iter(|| hisce_loss(black_box(&hier.levels[2]), tables[2].row(path[2])).unwrap())
    });
    for mode in [TpKlMode::PerLevel, TpKlMode::Global] {
        c.bench_function(&format!("tp-kl {mode:?}"), |b| {
            b.iter(|| tp_kl_loss(black_box(&hier), &path, mode).unwrap())
        });
    }
    c.bench_function("total loss", |b| {
        b.iter(|| total_loss(black_box(&hier), &path, &tables, &weights, TpKlMode::PerLevel).unwrap())
    });
    c.bench_function("smoothing tables", |b| {
        b.iter(|| build_smoothing_tables(black_box(&tax), &Epsilon::Global(0.1)).unwrap())
    });
}

criterion_group!(benches, bench);
criterion_main!(benches);
