//! Per-level accuracy, class-weighted precision (wAP), tree inconsistency
//! error (TICE) and full-path accuracy (FPA).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{LabelPath, Taxonomy};

/// Predicted and ground-truth paths for `N ≥ 1` samples, range-checked.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    predicted: Vec<LabelPath>,
    truth: Vec<LabelPath>,
}

impl PredictionSet {
    pub fn new(taxonomy: &Taxonomy, predicted: Vec<LabelPath>, truth: Vec<LabelPath>) -> Result<Self> {
        if predicted.is_empty() {
            return Err(Error::EmptyPredictions);
        }
        if predicted.len() != truth.len() {
            return Err(Error::DimensionMismatch {
                what: "prediction and truth counts",
                expected: truth.len(),
                got: predicted.len(),
            });
        }
        for p in predicted.iter().chain(&truth) {
            taxonomy.check_path(p)?;
        }
        Ok(PredictionSet { predicted, truth })
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn num_levels(&self) -> usize {
        self.truth[0].len()
    }

    pub fn predicted(&self) -> &[LabelPath] {
        &self.predicted
    }

    pub fn truth(&self) -> &[LabelPath] {
        &self.truth
    }

    fn pairs(&self) -> impl Iterator<Item = (&LabelPath, &LabelPath)> {
        self.predicted.iter().zip(&self.truth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAccuracy {
    pub per_level: Vec<f64>,
    pub macro_avg: f64,
}

pub fn level_accuracy(preds: &PredictionSet) -> LevelAccuracy {
    let n = preds.len() as f64;
    let mut correct = vec![0usize; preds.num_levels()];
    for (p, t) in preds.pairs() {
        for (c, (a, b)) in correct.iter_mut().zip(p.ids().iter().zip(t.ids())) {
            *c += usize::from(a == b);
        }
    }
    let per_level: Vec<f64> = correct.iter().map(|&c| c as f64 / n).collect();
    let macro_avg = per_level.iter().sum::<f64>() / per_level.len() as f64;
    LevelAccuracy { per_level, macro_avg }
}

/// Macro-averaged precision at each level. Classes that are never predicted
/// contribute precision 0.
pub fn level_precision(preds: &PredictionSet, taxonomy: &Taxonomy) -> Vec<f64> {
    taxonomy
        .levels()
        .iter()
        .enumerate()
        .map(|(l, level)| {
            let mut predicted = vec![0usize; level.len()];
            let mut hits = vec![0usize; level.len()];
            for (p, t) in preds.pairs() {
                predicted[p[l]] += 1;
                hits[p[l]] += usize::from(p[l] == t[l]);
            }
            let sum: f64 = predicted
                .iter()
                .zip(&hits)
                .map(|(&np, &h)| if np == 0 { 0.0 } else { h as f64 / np as f64 })
                .sum();
            sum / level.len() as f64
        })
        .collect()
}

/// Per-level precision weighted by each level's share of all classes.
pub fn weighted_ap(preds: &PredictionSet, taxonomy: &Taxonomy) -> f64 {
    let weights = level_weights(taxonomy);
    level_precision(preds, taxonomy)
        .iter()
        .zip(&weights)
        .map(|(p, w)| p * w)
        .sum()
}

/// `C_l / Σ C_k` for each level.
pub fn level_weights(taxonomy: &Taxonomy) -> Vec<f64> {
    let total = taxonomy.total_classes() as f64;
    taxonomy.level_sizes().iter().map(|&c| c as f64 / total).collect()
}

pub fn invalid_path_count(preds: &PredictionSet, taxonomy: &Taxonomy) -> usize {
    preds
        .predicted
        .iter()
        .filter(|p| !taxonomy.path_is_consistent(p.ids()))
        .count()
}

/// Fraction of predicted paths that break a parent-child link.
pub fn tice(preds: &PredictionSet, taxonomy: &Taxonomy) -> f64 {
    invalid_path_count(preds, taxonomy) as f64 / preds.len() as f64
}

/// Fraction of samples correct at every level.
pub fn fpa(preds: &PredictionSet) -> f64 {
    preds.pairs().filter(|(p, t)| p == t).count() as f64 / preds.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub level_accuracy: Vec<f64>,
    pub accuracy: f64,
    pub level_precision: Vec<f64>,
    pub wap: f64,
    pub tice: f64,
    pub fpa: f64,
    pub invalid_paths: usize,
    /// Entry `l - 1` counts predictions whose level-`l` class is not a child
    /// of the predicted level-`l - 1` class.
    pub broken_links: Vec<usize>,
}

pub fn evaluate(preds: &PredictionSet, taxonomy: &Taxonomy) -> EvalReport {
    let acc = level_accuracy(preds);
    let precision = level_precision(preds, taxonomy);
    let wap = precision.iter().zip(level_weights(taxonomy)).map(|(p, w)| p * w).sum();
    let mut broken_links = vec![0usize; preds.num_levels().saturating_sub(1)];
    for p in &preds.predicted {
        for l in 1..p.len() {
            if taxonomy.parent(l, p[l]).ok().flatten() != Some(p[l - 1]) {
                broken_links[l - 1] += 1;
            }
        }
    }
    let invalid_paths = invalid_path_count(preds, taxonomy);
    EvalReport {
        samples: preds.len(),
        level_accuracy: acc.per_level,
        accuracy: acc.macro_avg,
        level_precision: precision,
        wap,
        tice: invalid_paths as f64 / preds.len() as f64,
        fpa: fpa(preds),
        invalid_paths,
        broken_links,
    }
}

impl EvalReport {
    /// Plain-text table for terminals and logs.
    pub fn to_table(&self, taxonomy: &Taxonomy) -> String {
        let mut out = String::new();
        out.push_str(&format!("samples        {}\n", self.samples));
        for (l, (a, p)) in self.level_accuracy.iter().zip(&self.level_precision).enumerate() {
            let name = taxonomy.level(l).map(|v| v.name().to_string()).unwrap_or_default();
            out.push_str(&format!(
                "level {:<2} {:<12} acc {:>6.2}  prec {:>6.2}\n",
                l + 1,
                name,
                100.0 * a,
                100.0 * p
            ));
        }
        out.push_str(&format!("Accuracy       {:>6.2}\n", 100.0 * self.accuracy));
        out.push_str(&format!("FPA            {:>6.2}\n", 100.0 * self.fpa));
        out.push_str(&format!("TICE           {:>6.2}\n", 100.0 * self.tice));
        out.push_str(&format!("wAP            {:>6.2}\n", 100.0 * self.wap));
        out.push_str(&format!("invalid paths  {}\n", self.invalid_paths));
        out
    }
}
