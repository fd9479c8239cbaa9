use hierloss::embedspace::Matrix;
use hierloss::trainer::{
    ablation, generate_synthetic, grid_search, init_model, train, train_model, AblationArm, OptimizerKind,
};
use hierloss::{Dataset, Epsilon, LossConfig, RunRecord, Samples, SynthSpec, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn twenty_samples() -> Dataset {
    let ds = generate_synthetic(&SynthSpec {
        branching: vec![2, 2],
        dim: 4,
        samples_per_leaf: 5,
        spread: 1.0,
        signal: 0.6,
        seed: 11,
    })
    .unwrap();
    let rows: Vec<Vec<f64>> = ds
        .train
        .features
        .iter_rows()
        .chain(ds.val.features.iter_rows())
        .map(<[f64]>::to_vec)
        .collect();
    let labels = ds.train.labels.iter().chain(&ds.val.labels).cloned().collect();
    let train = Samples {
        features: Matrix::from_rows(&rows).unwrap(),
        labels,
    };
    assert_eq!(train.len(), 20);
    Dataset { train, ..ds }
}

/// Plain multi-level softmax cross-entropy descent on `W0 + s·B·A` with
/// cosine logits, written without any library loss or gradient code.
struct Reference {
    w0: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    s: f64,
    classes: Vec<Vec<Vec<f64>>>,
    tau: f64,
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

impl Reference {
    fn loss_grad(&self, x: &[f64], path: &[usize]) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let u = matvec(&self.a, x);
        let base = matvec(&self.w0, x);
        let bu = matvec(&self.b, &u);
        let h: Vec<f64> = base.iter().zip(&bu).map(|(p, q)| p + self.s * q).collect();
        let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut loss = 0.0;
        let mut dh = vec![0.0; h.len()];
        for (level, &y) in self.classes.iter().zip(path) {
            let z: Vec<f64> = level
                .iter()
                .map(|t| {
                    let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                    t.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() / (tn * n)
                })
                .collect();
            let m = z.iter().map(|v| v / self.tau).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v / self.tau - m).exp()).collect();
            let sum: f64 = e.iter().sum();
            loss += -(z[y] / self.tau - m - sum.ln());
            for (c, t) in level.iter().enumerate() {
                let g = (e[c] / sum - if c == y { 1.0 } else { 0.0 }) / self.tau;
                let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                for k in 0..h.len() {
                    dh[k] += g * (t[k] / (tn * n) - z[c] * h[k] / (n * n));
                }
            }
        }
        let ga = (0..self.a.len())
            .map(|i| {
                let bt_dh: f64 = (0..h.len()).map(|k| self.b[k][i] * dh[k]).sum();
                x.iter().map(|xj| self.s * bt_dh * xj).collect()
            })
            .collect();
        let gb = dh
            .iter()
            .map(|d| u.iter().map(|uj| self.s * d * uj).collect())
            .collect();
        (loss, ga, gb)
    }

    fn step(&mut self, data: &Samples, lr: f64) -> f64 {
        let n = data.len() as f64;
        let mut total = 0.0;
        let mut ga = vec![vec![0.0; self.a[0].len()]; self.a.len()];
        let mut gb = vec![vec![0.0; self.b[0].len()]; self.b.len()];
        for (x, p) in data.features.iter_rows().zip(&data.labels) {
            let (l, a, b) = self.loss_grad(x, p.ids());
            total += l;
            for (acc, g) in ga.iter_mut().flatten().zip(a.iter().flatten()) {
                *acc += g;
            }
            for (acc, g) in gb.iter_mut().flatten().zip(b.iter().flatten()) {
                *acc += g;
            }
        }
        for (p, g) in self.a.iter_mut().flatten().zip(ga.iter().flatten()) {
            *p -= lr * g / n;
        }
        for (p, g) in self.b.iter_mut().flatten().zip(gb.iter().flatten()) {
            *p -= lr * g / n;
        }
        total / n
    }
}

#[test]
fn plain_ce_descent_matches_reference_loop() {
    let data = twenty_samples();
    let config = TrainConfig {
        epochs: 3,
        batch_size: 20,
        lr: 0.05,
        weight_decay: 0.0,
        optimizer: OptimizerKind::Sgd,
        rank: 2,
        alpha: 4.0,
        seed: 3,
        check_grads: false,
        loss: LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            epsilon: Epsilon::Global(0.0),
            ..LossConfig::default()
        },
    };
    let init = init_model(&config, &data, &mut ChaCha8Rng::seed_from_u64(config.seed)).unwrap();
    let mut reference = Reference {
        w0: to_rows(&init.adapter.w0),
        a: to_rows(&init.adapter.a),
        b: to_rows(&init.adapter.b),
        s: config.alpha / config.rank as f64,
        classes: data.class_embeds.iter().map(to_rows).collect(),
        tau: config.loss.tau,
    };
    let (record, model) = train_model(&config, &data).unwrap();
    for epoch in 1..=3 {
        let before = reference.step(&data.train, config.lr);
        let logged = record.epochs[epoch - 1].train_loss.total;
        assert!(
            (before - logged).abs() <= 1e-12 * logged.abs().max(1.0),
            "epoch {epoch}: {before} vs {logged}"
        );
    }
    for (got, want) in model.adapter.a.as_slice().iter().zip(reference.a.iter().flatten()) {
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "A {got} vs {want}");
    }
    for (got, want) in model.adapter.b.as_slice().iter().zip(reference.b.iter().flatten()) {
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "B {got} vs {want}");
    }
}

#[test]
fn ce_only_separates_clean_data() {
    let data = generate_synthetic(&SynthSpec {
        branching: vec![3, 3],
        dim: 16,
        samples_per_leaf: 10,
        spread: 0.05,
        signal: 0.5,
        seed: 2,
    })
    .unwrap();
    let config = AblationArm::CeOnly.configure(
        &TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        },
        false,
    );
    let (_, model) = train_model(&config, &data).unwrap();
    let report = model.evaluate(&data, &data.train).unwrap();
    assert!(report.fpa >= 0.95, "train FPA {}", report.fpa);
}

fn small_config() -> (Dataset, TrainConfig) {
    let data = generate_synthetic(&SynthSpec {
        branching: vec![2, 3],
        dim: 8,
        samples_per_leaf: 8,
        seed: 4,
        ..SynthSpec::default()
    })
    .unwrap();
    let config = TrainConfig {
        epochs: 4,
        batch_size: 8,
        rank: 4,
        alpha: 8.0,
        lr: 5e-3,
        ..TrainConfig::default()
    };
    (data, config)
}

#[test]
fn grid_is_reproducible_and_matches_single_runs() {
    let (data, config) = small_config();
    let l1 = [0.0, 1.0, 2.0];
    let l2 = [0.0, 0.5, 1.0];
    let a = grid_search(&l1, &l2, &config, &data).unwrap();
    let b = grid_search(&l1, &l2, &config, &data).unwrap();
    assert_eq!(a.cells.len(), 9);
    assert_eq!(a.failed, 0);
    assert_eq!(a.best, b.best);
    let json = |r: Option<&RunRecord>| serde_json::to_string(r.unwrap()).unwrap();
    for (x, y) in a.cells.iter().zip(&b.cells) {
        assert_eq!(json(x.record()), json(y.record()));
    }
    let cell = &a.cells[5];
    assert_eq!((cell.lambda1, cell.lambda2), (1.0, 1.0));
    let mut single = config.clone();
    single.loss.lambda1 = 1.0;
    single.loss.lambda2 = 1.0;
    assert_eq!(json(cell.record()), json(Some(&train(&single, &data).unwrap())));
    assert_eq!(a.response_csv().lines().count(), 10);
}

#[test]
fn ablation_arms_share_initial_state() {
    let (data, mut config) = small_config();
    config.loss.lambda1 = 0.7;
    config.loss.lambda2 = 1.3;
    let result = ablation(&config, &data, false);
    let rec = |arm| result.record(arm).unwrap();
    let e0: Vec<_> = AblationArm::ALL.iter().map(|&a| &rec(a).epochs[0]).collect();
    for e in &e0[1..] {
        assert_eq!(e.val_fpa, e0[0].val_fpa);
        assert_eq!(e.val_accuracy, e0[0].val_accuracy);
        assert_eq!(e.train_loss.ce, e0[0].train_loss.ce);
    }
    let ce = rec(AblationArm::CeOnly).epochs[0].train_loss.total;
    let tp = rec(AblationArm::TpklOnly).epochs[0].train_loss.total;
    let hs = rec(AblationArm::HisceOnly).epochs[0].train_loss.total;
    let joint = rec(AblationArm::Joint).epochs[0].train_loss.total;
    assert!((joint - (ce + tp + hs)).abs() < 1e-12 * joint);
    assert!((tp - 0.7 * e0[0].train_loss.tpkl).abs() < 1e-12 * tp);
    assert!((hs - 1.3 * e0[0].train_loss.hisce).abs() < 1e-12 * hs);
    assert_eq!(result.table().lines().count(), 5);
}

#[test]
fn checked_training_run() {
    let (data, mut config) = small_config();
    config.check_grads = true;
    config.loss.tpkl_mode = hierloss::TpKlMode::Global;
    train(&config, &data).unwrap();
}
