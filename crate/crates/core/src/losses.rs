//! Cross-entropy, sibling-smoothed cross-entropy, tree-path KL divergence and
//! the combined objective, each returning its value together with the
//! analytic gradient with respect to the raw logits.
//!
//! All multi-level terms divide the logits by the temperature carried in
//! [`HierLogits`] before any softmax, so gradients include the `1/tau` factor.

use serde::{Deserialize, Serialize};

use crate::embedspace::{HierLogits, Matrix};
use crate::error::{Error, Result};
use crate::taxonomy::{LabelPath, Taxonomy};

/// Loss value with gradient for a single logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Loss value with one gradient vector per taxonomy level.
#[derive(Debug, Clone, PartialEq)]
pub struct HierLossGrad {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Combined objective broken down by term. Term values are unweighted.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    pub ce: f64,
    pub tpkl: f64,
    pub hisce: f64,
    pub grads: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TpKlMode {
    /// Softmax within each level, blocks scaled by `1/L`.
    #[default]
    PerLevel,
    /// One softmax over the concatenation of all levels.
    Global,
}

impl std::str::FromStr for TpKlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-level" => Ok(TpKlMode::PerLevel),
            "global" => Ok(TpKlMode::Global),
            other => Err(Error::invalid("tpkl_mode", format!("unknown mode {other:?}"))),
        }
    }
}

/// Weights of the combined objective `ce·CE + lambda1·TPKL + lambda2·HiSCE`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the plain cross-entropy term; 1 except in ablations that drop it.
    #[serde(default = "one")]
    pub ce: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

fn one() -> f64 {
    1.0
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let w = LossWeights {
            ce: 1.0,
            lambda1,
            lambda2,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ce", self.ce), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(
                    "loss weights",
                    format!("{name} must be finite and nonnegative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 1.0,
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }
}

/// Sibling smoothing mass: one value for every level, or one per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Epsilon {
    Global(f64),
    PerLevel(Vec<f64>),
}

impl Epsilon {
    pub fn for_level(&self, level: usize) -> Result<f64> {
        match self {
            Epsilon::Global(e) => Ok(*e),
            Epsilon::PerLevel(v) => v.get(level).copied().ok_or(Error::invalid(
                "epsilon",
                format!("no value for level {level} ({} given)", v.len()),
            )),
        }
    }
}

impl Default for Epsilon {
    fn default() -> Self {
        Epsilon::Global(0.1)
    }
}

/// Loss section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: Epsilon,
    pub tau: f64,
    pub tpkl_mode: TpKlMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ce_weight: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            epsilon: Epsilon::default(),
            tau: 0.07,
            tpkl_mode: TpKlMode::PerLevel,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            ce: self.ce_weight,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau", format!("must be positive, got {}", self.tau)));
        }
        let check = |e: f64| {
            if (0.0..1.0).contains(&e) {
                Ok(())
            } else {
                Err(Error::invalid("epsilon", format!("must lie in [0, 1), got {e}")))
            }
        };
        match &self.epsilon {
            Epsilon::Global(e) => check(*e),
            Epsilon::PerLevel(v) => v.iter().try_for_each(|&e| check(e)),
        }
    }
}

/// Row-stochastic sibling-smoothing targets for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingTable {
    pub level: usize,
    pub epsilon: f64,
    pub matrix: Matrix,
}

impl SmoothingTable {
    pub fn row(&self, class_id: usize) -> &[f64] {
        self.matrix.row(class_id)
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.rows()
    }
}

/// Row `i` keeps `1 - epsilon` on `i` and spreads `epsilon` evenly over the
/// siblings of `i`. A class without siblings keeps the full mass.
pub fn build_smoothing_table(taxonomy: &Taxonomy, level: usize, epsilon: f64) -> Result<SmoothingTable> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid("epsilon", format!("must lie in [0, 1), got {epsilon}")));
    }
    let n = taxonomy.level(level)?.len();
    let mut matrix = Matrix::zeros(n, n);
    for i in 0..n {
        let sibs = taxonomy.siblings(level, i)?;
        let row = matrix.row_mut(i);
        if sibs.is_empty() {
            row[i] = 1.0;
        } else {
            row[i] = 1.0 - epsilon;
            let share = epsilon / sibs.len() as f64;
            for j in sibs {
                row[j] = share;
            }
        }
    }
    Ok(SmoothingTable { level, epsilon, matrix })
}

/// One table per level.
pub fn build_smoothing_tables(taxonomy: &Taxonomy, epsilon: &Epsilon) -> Result<Vec<SmoothingTable>> {
    (0..taxonomy.num_levels())
        .map(|l| build_smoothing_table(taxonomy, l, epsilon.for_level(l)?))
        .collect()
}

/// Scaled one-hot path target: `1/L` at each ground-truth class, levels
/// concatenated coarse to fine.
pub fn path_target(taxonomy: &Taxonomy, path: &LabelPath) -> Result<Vec<f64>> {
    taxonomy.check_path(path)?;
    let l = taxonomy.num_levels() as f64;
    let mut y = vec![0.0; taxonomy.total_classes()];
    let mut offset = 0;
    for (lvl, &id) in taxonomy.levels().iter().zip(path.ids()) {
        y[offset + id] = 1.0 / l;
        offset += lvl.len();
    }
    Ok(y)
}

fn check_finite(z: &[f64]) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("logits"))
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// Standard cross-entropy at class `target` on raw logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<LossGrad> {
    check_finite(logits)?;
    if target >= logits.len() {
        return Err(Error::ClassOutOfRange {
            level: 0,
            id: target,
            classes: logits.len(),
        });
    }
    let lp = log_softmax(logits);
    let mut grad: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    grad[target] -= 1.0;
    Ok(LossGrad {
        loss: -lp[target],
        grad,
    })
}

/// Cross-entropy against a soft target row: `-Σ t_j log softmax(z)_j`, with
/// gradient `softmax(z) - t`.
pub fn hisce_loss(logits: &[f64], target_row: &[f64]) -> Result<LossGrad> {
    check_finite(logits)?;
    if logits.len() != target_row.len() {
        return Err(Error::DimensionMismatch {
            what: "smoothed target row",
            expected: logits.len(),
            got: target_row.len(),
        });
    }
    let lp = log_softmax(logits);
    let loss = -lp.iter().zip(target_row).map(|(l, t)| t * l).sum::<f64>();
    let grad = lp.iter().zip(target_row).map(|(l, t)| l.exp() - t).collect();
    Ok(LossGrad { loss, grad })
}

fn check_shapes(hier: &HierLogits, path: &LabelPath) -> Result<()> {
    if hier.levels.is_empty() {
        return Err(Error::NoLevels);
    }
    if path.len() != hier.levels.len() {
        return Err(Error::PathLength {
            expected: hier.levels.len(),
            got: path.len(),
        });
    }
    for (l, (z, &id)) in hier.levels.iter().zip(path.ids()).enumerate() {
        if z.is_empty() {
            return Err(Error::EmptyLevel {
                level: l,
                name: format!("logits level {l}"),
            });
        }
        if id >= z.len() {
            return Err(Error::ClassOutOfRange {
                level: l,
                id,
                classes: z.len(),
            });
        }
        check_finite(z)?;
    }
    Ok(())
}

/// `KL(Y ‖ P)` between the scaled one-hot path target and the tempered
/// prediction distribution over all concatenated levels.
pub fn tp_kl_loss(hier: &HierLogits, path: &LabelPath, mode: TpKlMode) -> Result<HierLossGrad> {
    check_shapes(hier, path)?;
    let n_levels = hier.levels.len() as f64;
    let inv_tau = 1.0 / hier.tau;
    let w = 1.0 / n_levels;
    match mode {
        TpKlMode::PerLevel => {
            // P block = w·softmax(z/tau), so log(Y_i/P_i) = -log softmax(z/tau)[y].
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(hier.levels.len());
            for (z, &y) in hier.levels.iter().zip(path.ids()) {
                let scaled: Vec<f64> = z.iter().map(|v| v * inv_tau).collect();
                let lp = log_softmax(&scaled);
                loss -= w * lp[y];
                let mut g: Vec<f64> = lp.iter().map(|v| w * inv_tau * v.exp()).collect();
                g[y] -= w * inv_tau;
                grads.push(g);
            }
            Ok(HierLossGrad { loss, grads })
        }
        TpKlMode::Global => {
            let concat: Vec<f64> = hier.levels.iter().flatten().map(|v| v * inv_tau).collect();
            let lp = log_softmax(&concat);
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(hier.levels.len());
            let mut offset = 0;
            for (z, &y) in hier.levels.iter().zip(path.ids()) {
                loss += w * (w.ln() - lp[offset + y]);
                let mut g: Vec<f64> = lp[offset..offset + z.len()].iter().map(|v| inv_tau * v.exp()).collect();
                g[y] -= w * inv_tau;
                grads.push(g);
                offset += z.len();
            }
            Ok(HierLossGrad { loss, grads })
        }
    }
}

/// `ce·CE + lambda1·TPKL + lambda2·HiSCE`, where CE and HiSCE are summed over
/// levels on the tempered logits.
pub fn total_loss(
    hier: &HierLogits,
    path: &LabelPath,
    tables: &[SmoothingTable],
    weights: &LossWeights,
    mode: TpKlMode,
) -> Result<TotalLoss> {
    check_shapes(hier, path)?;
    if tables.len() != hier.levels.len() {
        return Err(Error::DimensionMismatch {
            what: "smoothing tables",
            expected: hier.levels.len(),
            got: tables.len(),
        });
    }
    let inv_tau = 1.0 / hier.tau;
    let mut grads: Vec<Vec<f64>> = hier.levels.iter().map(|z| vec![0.0; z.len()]).collect();
    let mut ce = 0.0;
    let mut hisce = 0.0;
    for (l, ((z, &y), table)) in hier.levels.iter().zip(path.ids()).zip(tables).enumerate() {
        if table.num_classes() != z.len() {
            return Err(Error::DimensionMismatch {
                what: "smoothing table size",
                expected: z.len(),
                got: table.num_classes(),
            });
        }
        let scaled: Vec<f64> = z.iter().map(|v| v * inv_tau).collect();
        let c = cross_entropy(&scaled, y)?;
        let h = hisce_loss(&scaled, table.row(y))?;
        ce += c.loss;
        hisce += h.loss;
        for ((g, gc), gh) in grads[l].iter_mut().zip(&c.grad).zip(&h.grad) {
            *g += inv_tau * (weights.ce * gc + weights.lambda2 * gh);
        }
    }
    let tp = tp_kl_loss(hier, path, mode)?;
    for (g, gt) in grads.iter_mut().zip(&tp.grads) {
        for (a, b) in g.iter_mut().zip(gt) {
            *a += weights.lambda1 * b;
        }
    }
    Ok(TotalLoss {
        total: weights.ce * ce + weights.lambda1 * tp.loss + weights.lambda2 * hisce,
        ce,
        tpkl: tp.loss,
        hisce,
        grads,
    })
}
