use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, RunRecord, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct GridCell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub outcome: Result<RunRecord>,
}

impl GridCell {
    pub fn record(&self) -> Option<&RunRecord> {
        self.outcome.as_ref().ok()
    }
}

#[derive(Debug)]
pub struct GridResult {
    /// Row-major over `lambda1` then `lambda2`.
    pub cells: Vec<GridCell>,
    /// Index into `cells` of the selected configuration.
    pub best: Option<usize>,
    pub failed: usize,
}

impl GridResult {
    pub fn best_cell(&self) -> Option<&GridCell> {
        self.best.map(|i| &self.cells[i])
    }

    /// One CSV row per cell.
    pub fn response_csv(&self) -> String {
        let mut out = String::from("lambda1,lambda2,status,accuracy,fpa,tice,wap,final_train_loss\n");
        for c in &self.cells {
            match &c.outcome {
                Ok(r) => {
                    let m = &r.final_report;
                    let loss = r.epochs.last().map_or(f64::NAN, |e| e.train_loss.total);
                    out.push_str(&format!(
                        "{},{},ok,{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                        c.lambda1, c.lambda2, m.accuracy, m.fpa, m.tice, m.wap, loss
                    ));
                }
                Err(e) => out.push_str(&format!(
                    "{},{},failed: {},,,,,\n",
                    c.lambda1,
                    c.lambda2,
                    e.to_string().replace(',', ";")
                )),
            }
        }
        out
    }
}

/// Strictly better under the selection rule: higher validation accuracy,
/// then lower TICE, then smaller `lambda1 + lambda2`.
fn better(a: &GridCell, b: &GridCell) -> bool {
    let (ra, rb) = match (a.record(), b.record()) {
        (Some(x), Some(y)) => (&x.final_report, &y.final_report),
        (Some(_), None) => return true,
        _ => return false,
    };
    if ra.accuracy != rb.accuracy {
        return ra.accuracy > rb.accuracy;
    }
    if ra.tice != rb.tice {
        return ra.tice < rb.tice;
    }
    a.lambda1 + a.lambda2 < b.lambda1 + b.lambda2
}

pub(crate) fn select(cells: &[GridCell]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        if c.record().is_none() {
            continue;
        }
        if best.is_none_or(|b| better(c, &cells[b])) {
            best = Some(i);
        }
    }
    best
}

/// Trains one run per `(lambda1, lambda2)` pair with the shared seed and
/// picks the best by validation macro accuracy. Cells run in parallel on
/// the current rayon pool; results keep grid order.
pub fn grid_search(lambda1: &[f64], lambda2: &[f64], config: &TrainConfig, data: &Dataset) -> Result<GridResult> {
    if lambda1.is_empty() || lambda2.is_empty() {
        return Err(Error::invalid("grid", "both lambda lists must be nonempty"));
    }
    let pairs: Vec<(f64, f64)> = lambda1
        .iter()
        .flat_map(|&a| lambda2.iter().map(move |&b| (a, b)))
        .collect();
    let cells: Vec<GridCell> = pairs
        .par_iter()
        .map(|&(l1, l2)| {
            let mut cfg = config.clone();
            cfg.loss.lambda1 = l1;
            cfg.loss.lambda2 = l2;
            GridCell {
                lambda1: l1,
                lambda2: l2,
                outcome: train(&cfg, data),
            }
        })
        .collect();
    let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    if failed > 0 {
        log::warn!("{failed} of {} grid cells failed and were excluded", cells.len());
    }
    Ok(GridResult {
        best: select(&cells),
        cells,
        failed,
    })
}

/// Paper-style response table: one metric per row, one λ₁ value per column.
/// Cells are taken in grid order; the λ₂ value is shown when it varies.
pub fn sweep_table(result: &GridResult) -> String {
    let single_l2 = result.cells.windows(2).all(|w| w[0].lambda2 == w[1].lambda2);
    let head: Vec<String> = result
        .cells
        .iter()
        .map(|c| {
            if single_l2 {
                format!("λ={}", c.lambda1)
            } else {
                format!("λ1={},λ2={}", c.lambda1, c.lambda2)
            }
        })
        .collect();
    let width = head.iter().map(|h| h.chars().count()).max().unwrap_or(6).max(8);
    let mut out = format!("{:<10}", if single_l2 { "CE + λ*KL" } else { "metric" });
    for h in &head {
        out.push_str(&format!(" {h:>width$}"));
    }
    out.push('\n');
    type Getter = fn(&crate::metrics::EvalReport) -> f64;
    let rows: [(&str, Getter); 4] = [
        ("Accuracy", |m| m.accuracy),
        ("FPA", |m| m.fpa),
        ("TICE", |m| m.tice),
        ("wAP", |m| m.wap),
    ];
    for (name, get) in rows {
        out.push_str(&format!("{name:<10}"));
        for c in &result.cells {
            let v = c
                .record()
                .map_or("failed".to_string(), |r| format!("{:.1}", 100.0 * get(&r.final_report)));
            out.push_str(&format!(" {v:>width$}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationArm {
    CeOnly,
    TpklOnly,
    HisceOnly,
    Joint,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::CeOnly,
        AblationArm::TpklOnly,
        AblationArm::HisceOnly,
        AblationArm::Joint,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationArm::CeOnly => "CE",
            AblationArm::TpklOnly => "TP-KL only",
            AblationArm::HisceOnly => "HiSCE only",
            AblationArm::Joint => "Joint",
        }
    }

    /// Configuration of this arm derived from `base`. The two single-term
    /// arms drop CE unless `keep_ce` is set.
    pub fn configure(self, base: &TrainConfig, keep_ce: bool) -> TrainConfig {
        let mut cfg = base.clone();
        let (l1, l2) = (base.loss.lambda1, base.loss.lambda2);
        let (ce, a, b) = match self {
            AblationArm::CeOnly => (1.0, 0.0, 0.0),
            AblationArm::TpklOnly => (if keep_ce { 1.0 } else { 0.0 }, l1, 0.0),
            AblationArm::HisceOnly => (if keep_ce { 1.0 } else { 0.0 }, 0.0, l2),
            AblationArm::Joint => (1.0, l1, l2),
        };
        cfg.loss.ce_weight = ce;
        cfg.loss.lambda1 = a;
        cfg.loss.lambda2 = b;
        cfg
    }
}

#[derive(Debug)]
pub struct Ablation {
    pub arms: Vec<(AblationArm, Result<RunRecord>)>,
}

impl Ablation {
    pub fn record(&self, arm: AblationArm) -> Option<&RunRecord> {
        self.arms
            .iter()
            .find(|(a, _)| *a == arm)
            .and_then(|(_, r)| r.as_ref().ok())
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8}\n",
            "Method", "Acc.", "FPA", "TICE", "wAP"
        );
        for (arm, rec) in &self.arms {
            match rec {
                Ok(r) => {
                    let m = &r.final_report;
                    out.push_str(&format!(
                        "{:<12} {:>8.1} {:>8.1} {:>8.1} {:>8.1}\n",
                        arm.label(),
                        100.0 * m.accuracy,
                        100.0 * m.fpa,
                        100.0 * m.tice,
                        100.0 * m.wap
                    ));
                }
                Err(e) => out.push_str(&format!("{:<12} failed: {e}\n", arm.label())),
            }
        }
        out
    }
}

/// Four runs sharing seed and data that differ only in the active loss terms.
pub fn ablation(config: &TrainConfig, data: &Dataset, keep_ce: bool) -> Ablation {
    let arms = AblationArm::ALL
        .par_iter()
        .map(|&arm| (arm, train(&arm.configure(config, keep_ce), data)))
        .collect();
    Ablation { arms }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::EvalReport;

    fn cell(l1: f64, l2: f64, acc: f64, tice: f64) -> GridCell {
        let report = EvalReport {
            samples: 1,
            level_accuracy: vec![acc],
            accuracy: acc,
            level_precision: vec![acc],
            wap: acc,
            tice,
            fpa: acc,
            invalid_paths: 0,
            broken_links: vec![],
        };
        GridCell {
            lambda1: l1,
            lambda2: l2,
            outcome: Ok(RunRecord {
                config: TrainConfig::default(),
                trainable_params: 0,
                epochs: vec![],
                final_report: report,
                wall_time_secs: 0.0,
            }),
        }
    }

    #[test]
    fn single_cell_wins() {
        assert_eq!(select(&[cell(1.0, 2.0, 0.1, 0.9)]), Some(0));
    }

    #[test]
    fn dominating_cell_selected() {
        let cells = [cell(0.0, 0.0, 0.6, 0.3), cell(1.0, 1.0, 0.7, 0.1)];
        assert_eq!(select(&cells), Some(1));
    }

    #[test]
    fn ties_break_on_tice_then_lambda_sum() {
        let cells = [
            cell(2.0, 0.0, 0.7, 0.2),
            cell(1.0, 1.0, 0.7, 0.1),
            cell(0.5, 0.0, 0.7, 0.1),
        ];
        assert_eq!(select(&cells), Some(2));
    }

    #[test]
    fn failures_are_skipped() {
        let cells = [
            GridCell {
                lambda1: 0.0,
                lambda2: 0.0,
                outcome: Err(Error::Diverged { epoch: 3, what: "loss" }),
            },
            cell(5.0, 5.0, 0.1, 0.9),
        ];
        assert_eq!(select(&cells), Some(1));
        assert_eq!(select(&cells[..1]), None);
    }

    #[test]
    fn arms_toggle_terms() {
        let base = TrainConfig::default();
        let t = AblationArm::TpklOnly.configure(&base, false);
        assert_eq!((t.loss.ce_weight, t.loss.lambda1, t.loss.lambda2), (0.0, 1.0, 0.0));
        let t = AblationArm::TpklOnly.configure(&base, true);
        assert_eq!(t.loss.ce_weight, 1.0);
        let c = AblationArm::CeOnly.configure(&base, false);
        assert_eq!((c.loss.ce_weight, c.loss.lambda1, c.loss.lambda2), (1.0, 0.0, 0.0));
    }
}
