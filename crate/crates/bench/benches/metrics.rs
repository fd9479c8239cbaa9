use criterion::{criterion_group, criterion_main, Criterion};
use hierloss::metrics::evaluate;
use hierloss::{LabelPath, PredictionSet, Taxonomy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench(c: &mut Criterion) {
    let tax = Taxonomy::balanced(&[13, 3, 5]).unwrap();
    let sizes = tax.level_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 5000;
    let truth: Vec<LabelPath> = (0..n)
        .map(|_| tax.ancestor_path(rng.random_range(0..tax.num_leaves())).unwrap())
        .collect();
    let pred: Vec<LabelPath> = (0..n)
        .map(|_| LabelPath(sizes.iter().map(|&c| rng.random_range(0..c)).collect()))
        .collect();
    let set = PredictionSet::new(&tax, pred, truth).unwrap();
    c.bench_function("evaluate 5000 samples", |b| b.iter(|| evaluate(black_box(&set), &tax)));
}

criterion_group!(benches, bench);
criterion_main!(benches);
