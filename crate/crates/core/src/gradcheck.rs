//! Central finite differences for checking analytic gradients, and a
//! randomized suite covering every loss and the adapter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embedspace::{AdapterState, ClassEmbeddings, HierLogits, Matrix};
use crate::error::Result;
use crate::losses::{build_smoothing_tables, hisce_loss, total_loss, tp_kl_loss, Epsilon, LossWeights, TpKlMode};
use crate::taxonomy::{ClassDocument, LabelPath, LevelDocument, Taxonomy, TaxonomyDocument};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_diff<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let up = f(&x);
            x[i] = point[i] - step;
            let down = f(&x);
            x[i] = point[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative error with a unit floor in the denominator: entries whose
/// magnitude is below 1 are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

pub const LOSS_STEP: f64 = 1e-5;
pub const LOSS_TOL: f64 = 1e-6;
pub const ADAPTER_STEP: f64 = 1e-4;
pub const ADAPTER_TOL: f64 = 1e-5;

/// Outcome of one target in [`randomized_suite`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub target: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Random taxonomy with up to `max_levels` levels of 2 to `max_classes`
/// classes, each non-root class under a random parent.
pub fn random_taxonomy(rng: &mut impl Rng, max_levels: usize, max_classes: usize) -> Result<Taxonomy> {
    let n_levels = rng.random_range(1..=max_levels);
    let mut levels: Vec<LevelDocument> = Vec::with_capacity(n_levels);
    for l in 0..n_levels {
        let n = rng.random_range(2..=max_classes);
        let classes = (0..n)
            .map(|c| ClassDocument {
                name: format!("c{l}_{c}"),
                parent: levels
                    .last()
                    .map(|prev| prev.classes[rng.random_range(0..prev.classes.len())].name.clone()),
            })
            .collect();
        levels.push(LevelDocument {
            name: format!("level{}", l + 1),
            classes,
        });
    }
    Taxonomy::from_document(&TaxonomyDocument { levels })
}

/// A valid label path drawn uniformly over the finest level.
pub fn random_path(rng: &mut impl Rng, taxonomy: &Taxonomy) -> Result<LabelPath> {
    taxonomy.ancestor_path(rng.random_range(0..taxonomy.num_leaves()))
}

fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn flat(levels: &[Vec<f64>]) -> Vec<f64> {
    levels.iter().flatten().copied().collect()
}

fn unflat(v: &[f64], shape: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(shape.len());
    let mut at = 0;
    for &n in shape {
        out.push(v[at..at + n].to_vec());
        at += n;
    }
    out
}

struct Tracker {
    target: &'static str,
    trials: usize,
    worst: f64,
    tolerance: f64,
}

impl Tracker {
    fn new(target: &'static str, tolerance: f64) -> Self {
        Tracker {
            target,
            trials: 0,
            worst: 0.0,
            tolerance,
        }
    }

    fn add(&mut self, analytic: &[f64], numeric: &[f64]) {
        self.trials += 1;
        let e = max_relative_error(analytic, numeric);
        self.worst = if e.is_nan() { f64::NAN } else { self.worst.max(e) };
    }

    fn finish(self) -> CheckSummary {
        CheckSummary {
            target: self.target,
            trials: self.trials,
            max_rel_error: self.worst,
            tolerance: self.tolerance,
            passed: self.worst < self.tolerance,
        }
    }
}

/// Compares analytic and central-difference gradients on `trials` random
/// instances per target: HiSCE, TP-KL in both modes, the combined objective
/// and the adapter parameters through the cosine logits.
pub fn randomized_suite(trials: usize, seed: u64) -> Result<Vec<CheckSummary>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hisce = Tracker::new("hisce", LOSS_TOL);
    let mut kl_level = Tracker::new("tp-kl per-level", LOSS_TOL);
    let mut kl_global = Tracker::new("tp-kl global", LOSS_TOL);
    let mut total = Tracker::new("total", LOSS_TOL);
    let mut adapter = Tracker::new("adapter", ADAPTER_TOL);
    for _ in 0..trials {
        let tax = random_taxonomy(&mut rng, 4, 10)?;
        let path = random_path(&mut rng, &tax)?;
        let shape = tax.level_sizes();
        let tau = rng.random_range(0.05..1.0);
        let eps = Epsilon::PerLevel((0..shape.len()).map(|_| rng.random_range(0.0..0.5)).collect());
        let tables = build_smoothing_tables(&tax, &eps)?;
        let weights = LossWeights {
            ce: rng.random_range(0.0..2.0),
            lambda1: rng.random_range(0.0..3.0),
            lambda2: rng.random_range(0.0..3.0),
        };
        let mode = if rng.random_bool(0.5) {
            TpKlMode::PerLevel
        } else {
            TpKlMode::Global
        };
        let z = flat(&shape.iter().map(|&n| random_vec(&mut rng, n, 1.0)).collect::<Vec<_>>());

        let l = rng.random_range(0..shape.len());
        let zl = random_vec(&mut rng, shape[l], 3.0);
        let row = tables[l].row(path[l]).to_vec();
        let g = hisce_loss(&zl, &row)?.grad;
        let n = central_diff(|v| hisce_loss(v, &row).map_or(f64::NAN, |r| r.loss), &zl, LOSS_STEP);
        hisce.add(&g, &n);

        for (tracker, m) in [(&mut kl_level, TpKlMode::PerLevel), (&mut kl_global, TpKlMode::Global)] {
            let g = flat(&tp_kl_loss(&HierLogits::new(unflat(&z, &shape), tau)?, &path, m)?.grads);
            let n = central_diff(
                |v| {
                    HierLogits::new(unflat(v, &shape), tau)
                        .and_then(|h| tp_kl_loss(&h, &path, m))
                        .map_or(f64::NAN, |r| r.loss)
                },
                &z,
                LOSS_STEP,
            );
            tracker.add(&g, &n);
        }

        let objective = |v: &[f64]| {
            HierLogits::new(unflat(v, &shape), tau)
                .and_then(|h| total_loss(&h, &path, &tables, &weights, mode))
                .map_or(f64::NAN, |r| r.total)
        };
        let g = flat(
            &total_loss(
                &HierLogits::new(unflat(&z, &shape), tau)?,
                &path,
                &tables,
                &weights,
                mode,
            )?
            .grads,
        );
        total.add(&g, &central_diff(objective, &z, LOSS_STEP));

        let dim = rng.random_range(2..=8);
        let in_dim = rng.random_range(2..=8);
        let rank = rng.random_range(1..=4);
        let embeds: Vec<Matrix> = shape
            .iter()
            .map(|&n| Matrix::from_vec(n, dim, random_vec(&mut rng, n * dim, 1.0)))
            .collect::<Result<_>>()?;
        let embeds = ClassEmbeddings::new(&embeds)?;
        let state = AdapterState::from_parts(
            Matrix::from_vec(dim, in_dim, random_vec(&mut rng, dim * in_dim, 1.0))?,
            Matrix::from_vec(rank, in_dim, random_vec(&mut rng, rank * in_dim, 1.0))?,
            Matrix::from_vec(dim, rank, random_vec(&mut rng, dim * rank, 1.0))?,
            rng.random_range(0.5..4.0),
        )?;
        let x = random_vec(&mut rng, in_dim, 1.0);
        let loss_at = |s: &AdapterState| -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
            let h = s.forward(&x)?;
            let hier = HierLogits::new(embeds.logits(&h)?, tau)?;
            let t = total_loss(&hier, &path, &tables, &weights, mode)?;
            Ok((t.total, h, t.grads))
        };
        let (_, h, up) = loss_at(&state)?;
        let z_now = embeds.logits(&h)?;
        let grad = state.grad(&x, &embeds.logits_backward(&h, &z_now, &up))?;
        let na = state.a.as_slice().len();
        let params: Vec<f64> = state.a.as_slice().iter().chain(state.b.as_slice()).copied().collect();
        let numeric = central_diff(
            |v| {
                let mut s = state.clone();
                s.a.as_mut_slice().copy_from_slice(&v[..na]);
                s.b.as_mut_slice().copy_from_slice(&v[na..]);
                loss_at(&s).map_or(f64::NAN, |r| r.0)
            },
            &params,
            ADAPTER_STEP,
        );
        let analytic: Vec<f64> = grad.a.as_slice().iter().chain(grad.b.as_slice()).copied().collect();
        adapter.add(&analytic, &numeric);
    }
    Ok([hisce, kl_level, kl_global, total, adapter]
        .into_iter()
        .map(Tracker::finish)
        .collect())
}
