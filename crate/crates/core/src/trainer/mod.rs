//! Mini-batch training of the feature adapter under the combined objective,
//! with λ grid search and loss-term ablation on top.

mod optim;
mod search;
mod synth;

pub use optim::{Optimizer, OptimizerKind};
pub use search::{ablation, grid_search, sweep_table, Ablation, AblationArm, GridCell, GridResult};
pub use synth::{class_means, generate_synthetic, split_indices, SynthSpec, VAL_FRACTION};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Samples};
use crate::embedspace::{AdapterGrad, AdapterState, ClassEmbeddings, HierLogits, Matrix};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::losses::{build_smoothing_tables, total_loss, LossConfig, SmoothingTable};
use crate::metrics::{evaluate, EvalReport, PredictionSet};
use crate::taxonomy::LabelPath;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Spot-check every applied gradient against finite differences.
    pub check_grads: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            optimizer: OptimizerKind::Adamw,
            rank: 16,
            alpha: 32.0,
            seed: 0,
            check_grads: false,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be finite and nonnegative"));
        }
        if self.rank == 0 {
            return Err(Error::invalid("rank", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha", "must be positive"));
        }
        self.loss.validate()
    }
}

/// Mean training loss over the full training split, by term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub tpkl: f64,
    pub hisce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0 is the untrained adapter.
    pub epoch: usize,
    pub train_loss: LossBreakdown,
    pub val_accuracy: f64,
    pub val_fpa: f64,
    pub val_tice: f64,
    pub val_wap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub trainable_params: usize,
    pub epochs: Vec<EpochLog>,
    pub final_report: EvalReport,
    /// Excluded from the serialized record so identical runs serialize identically.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunRecord {
    /// Per-epoch losses and validation metrics, one CSV row per epoch.
    pub fn epochs_csv(&self) -> String {
        let mut out =
            String::from("epoch,loss_total,loss_ce,loss_tpkl,loss_hisce,val_accuracy,val_fpa,val_tice,val_wap\n");
        for e in &self.epochs {
            let l = &e.train_loss;
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                e.epoch, l.total, l.ce, l.tpkl, l.hisce, e.val_accuracy, e.val_fpa, e.val_tice, e.val_wap
            ));
        }
        out
    }
}

/// Adapter plus the fixed pieces needed to score samples.
#[derive(Debug, Clone)]
pub struct Model {
    pub adapter: AdapterState,
    embeds: ClassEmbeddings,
    tables: Vec<SmoothingTable>,
    loss: LossConfig,
}

/// Per-sample objective and its gradient with respect to the adapter.
struct SampleTerms {
    total: f64,
    ce: f64,
    tpkl: f64,
    hisce: f64,
}

impl Model {
    pub fn new(adapter: AdapterState, data: &Dataset, loss: &LossConfig) -> Result<Self> {
        let embeds = ClassEmbeddings::new(&data.class_embeds)?;
        if embeds.dim() != adapter.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "adapter output vs class embeddings",
                expected: embeds.dim(),
                got: adapter.output_dim(),
            });
        }
        Ok(Model {
            adapter,
            embeds,
            tables: build_smoothing_tables(&data.taxonomy, &loss.epsilon)?,
            loss: loss.clone(),
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<HierLogits> {
        let h = self.adapter.forward(x)?;
        HierLogits::new(self.embeds.logits(&h)?, self.loss.tau)
    }

    pub fn predict(&self, x: &[f64]) -> Result<LabelPath> {
        Ok(LabelPath(self.logits(x)?.argmax()))
    }

    pub fn transform(&self, samples: &Samples) -> Result<Matrix> {
        let rows = samples
            .features
            .iter_rows()
            .map(|x| self.adapter.forward(x))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    fn sample(&self, x: &[f64], path: &LabelPath, grad: Option<&mut AdapterGrad>) -> Result<SampleTerms> {
        let h = self.adapter.forward(x)?;
        let z = self.embeds.logits(&h)?;
        let hier = HierLogits::new(z, self.loss.tau)?;
        let t = total_loss(&hier, path, &self.tables, &self.loss.weights(), self.loss.tpkl_mode)?;
        if let Some(acc) = grad {
            let dh = self.embeds.logits_backward(&h, &hier.levels, &t.grads);
            self.adapter.accumulate_grad(x, &dh, acc)?;
        }
        Ok(SampleTerms {
            total: t.total,
            ce: t.ce,
            tpkl: t.tpkl,
            hisce: t.hisce,
        })
    }

    /// Mean objective over `idx` and, optionally, its gradient.
    fn batch(&self, samples: &Samples, idx: &[usize], grad: Option<&mut AdapterGrad>) -> Result<LossBreakdown> {
        let mut sum = LossBreakdown {
            total: 0.0,
            ce: 0.0,
            tpkl: 0.0,
            hisce: 0.0,
        };
        let mut grad = grad;
        for &i in idx {
            let t = self.sample(samples.features.row(i), &samples.labels[i], grad.as_deref_mut())?;
            sum.total += t.total;
            sum.ce += t.ce;
            sum.tpkl += t.tpkl;
            sum.hisce += t.hisce;
        }
        let n = idx.len() as f64;
        if let Some(g) = grad {
            g.scale(1.0 / n);
        }
        Ok(LossBreakdown {
            total: sum.total / n,
            ce: sum.ce / n,
            tpkl: sum.tpkl / n,
            hisce: sum.hisce / n,
        })
    }

    pub fn mean_loss(&self, samples: &Samples) -> Result<LossBreakdown> {
        let idx: Vec<usize> = (0..samples.len()).collect();
        self.batch(samples, &idx, None)
    }

    /// Mean objective and gradient over a batch.
    pub fn loss_and_grad(&self, samples: &Samples, idx: &[usize]) -> Result<(LossBreakdown, AdapterGrad)> {
        let mut g = AdapterGrad::zeros_like(&self.adapter);
        let l = self.batch(samples, idx, Some(&mut g))?;
        Ok((l, g))
    }

    pub fn predictions(&self, samples: &Samples) -> Result<Vec<LabelPath>> {
        samples.features.iter_rows().map(|x| self.predict(x)).collect()
    }

    pub fn evaluate(&self, data: &Dataset, samples: &Samples) -> Result<EvalReport> {
        let set = PredictionSet::new(&data.taxonomy, self.predictions(samples)?, samples.labels.clone())?;
        Ok(evaluate(&set, &data.taxonomy))
    }
}

const SPOT_CHECKS: usize = 4;
const SPOT_STEP: f64 = 1e-5;
const SPOT_TOL: f64 = 1e-5;

fn param_mut(m: &mut Model, in_a: bool, slot: usize) -> &mut f64 {
    if in_a {
        &mut m.adapter.a.as_mut_slice()[slot]
    } else {
        &mut m.adapter.b.as_mut_slice()[slot]
    }
}

/// Compares a few random gradient entries with central differences of the
/// batch objective.
fn spot_check(model: &Model, samples: &Samples, idx: &[usize], grad: &AdapterGrad, rng: &mut ChaCha8Rng) -> Result<()> {
    let na = grad.a.as_slice().len();
    let nb = grad.b.as_slice().len();
    let mut probe = model.clone();
    for _ in 0..SPOT_CHECKS {
        let k = rng.random_range(0..na + nb);
        let (name, slot, analytic) = if k < na {
            ("A", k, grad.a.as_slice()[k])
        } else {
            ("B", k - na, grad.b.as_slice()[k - na])
        };
        let in_a = k < na;
        let orig = *param_mut(&mut probe, in_a, slot);
        let numeric = gradcheck::central_diff(
            |v| {
                *param_mut(&mut probe, in_a, slot) = v[0];
                probe.batch(samples, idx, None).map(|l| l.total).unwrap_or(f64::NAN)
            },
            &[orig],
            SPOT_STEP,
        )[0];
        *param_mut(&mut probe, in_a, slot) = orig;
        let err = gradcheck::relative_error(analytic, numeric);
        if err.is_nan() || err >= SPOT_TOL {
            return Err(Error::GradientCheck {
                param: name,
                index: slot,
                analytic,
                numeric,
            });
        }
    }
    Ok(())
}

fn epoch_log(epoch: usize, model: &Model, data: &Dataset) -> Result<EpochLog> {
    let train_loss = model.mean_loss(&data.train).map_err(|e| diverged(e, epoch))?;
    if !train_loss.total.is_finite() {
        return Err(Error::Diverged {
            epoch,
            what: "training loss",
        });
    }
    let report = model.evaluate(data, &data.val).map_err(|e| diverged(e, epoch))?;
    Ok(EpochLog {
        epoch,
        train_loss,
        val_accuracy: report.accuracy,
        val_fpa: report.fpa,
        val_tice: report.tice,
        val_wap: report.wap,
    })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(what) | Error::ZeroNorm(what) => Error::Diverged { epoch, what },
        other => other,
    }
}

/// Fresh adapter over an identity base projection, initialized from `seed`.
pub fn init_model(config: &TrainConfig, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<Model> {
    let adapter = AdapterState::init(Matrix::identity(data.dim()), config.rank, config.alpha, rng)?;
    Model::new(adapter, data, &config.loss)
}

/// Trains an adapter and returns the run record together with the final model.
pub fn train_model(config: &TrainConfig, data: &Dataset) -> Result<(RunRecord, Model)> {
    config.validate()?;
    data.validate()?;
    if data.val.is_empty() {
        return Err(Error::invalid("dataset", "validation split is empty"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut check_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut model = init_model(config, data, &mut rng)?;
    let mut opt = Optimizer::new(config.optimizer, config.lr, config.weight_decay, &model.adapter);
    let mut epochs = vec![epoch_log(0, &model, data)?];
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (loss, grad) = model
                .loss_and_grad(&data.train, batch)
                .map_err(|e| diverged(e, epoch))?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    what: "batch loss",
                });
            }
            if config.check_grads {
                spot_check(&model, &data.train, batch, &grad, &mut check_rng)?;
            }
            opt.step(&mut model.adapter, &grad);
        }
        let log = epoch_log(epoch, &model, data)?;
        log::debug!(
            "epoch {epoch}: loss {:.5} val acc {:.4} fpa {:.4} tice {:.4}",
            log.train_loss.total,
            log.val_accuracy,
            log.val_fpa,
            log.val_tice
        );
        epochs.push(log);
    }
    let final_report = model.evaluate(data, &data.val)?;
    let record = RunRecord {
        config: config.clone(),
        trainable_params: model.adapter.trainable_params(),
        epochs,
        final_report,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((record, model))
}

pub fn train(config: &TrainConfig, data: &Dataset) -> Result<RunRecord> {
    train_model(config, data).map(|(r, _)| r)
}
