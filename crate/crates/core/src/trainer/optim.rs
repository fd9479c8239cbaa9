use serde::{Deserialize, Serialize};

use crate::embedspace::{AdapterGrad, AdapterState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Sgd,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// AdamW with bias-corrected moments and decoupled weight decay, or plain
/// SGD with the same decoupled decay.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, state: &AdapterState) -> Self {
        let n = state.a.as_slice().len() + state.b.as_slice().len();
        Optimizer {
            kind,
            lr,
            weight_decay,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, state: &mut AdapterState, grad: &AdapterGrad) {
        self.step += 1;
        let na = state.a.as_slice().len();
        let (lr, wd) = (self.lr, self.weight_decay);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in state.a.as_mut_slice().iter_mut().zip(grad.a.as_slice()) {
                    *p -= lr * (g + wd * *p);
                }
                for (p, g) in state.b.as_mut_slice().iter_mut().zip(grad.b.as_slice()) {
                    *p -= lr * (g + wd * *p);
                }
            }
            OptimizerKind::Adamw => {
                let bc1 = 1.0 - BETA1.powi(self.step);
                let bc2 = 1.0 - BETA2.powi(self.step);
                let (ma, mb) = self.m.split_at_mut(na);
                let (va, vb) = self.v.split_at_mut(na);
                let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m).zip(v) {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * *p);
                    }
                };
                update(state.a.as_mut_slice(), grad.a.as_slice(), ma, va);
                update(state.b.as_mut_slice(), grad.b.as_slice(), mb, vb);
            }
        }
    }
}
