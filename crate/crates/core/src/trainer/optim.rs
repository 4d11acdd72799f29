use serde::{Deserialize, Serialize};

use crate::encoder::{TowerGrads, TowerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state for one tower's flattened parameters (embedding, projection, bias).
#[derive(Debug, Clone)]
pub(crate) struct TowerOptimizer {
    kind: OptimizerKind,
    adam: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    dense_embedding: Vec<f64>,
}

impl TowerOptimizer {
    pub(crate) fn new(kind: OptimizerKind, adam: AdamParams, tower: &TowerModel) -> Self {
        let n = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::AdamLike => tower.parameter_count(),
        };
        Self {
            kind,
            adam,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            dense_embedding: vec![0.0; tower.embedding.len()],
        }
    }

    pub(crate) fn step(&mut self, tower: &mut TowerModel, grads: &TowerGrads, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                let h = tower.hidden;
                for (t, row) in grads.embedding_rows() {
                    let t = t as usize;
                    for (p, g) in tower.embedding[t * h..(t + 1) * h].iter_mut().zip(row) {
                        *p -= lr * g;
                    }
                }
                for (p, g) in tower.projection.iter_mut().zip(&grads.projection) {
                    *p -= lr * g;
                }
                for (p, g) in tower.bias.iter_mut().zip(&grads.bias) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::AdamLike => {
                self.t += 1;
                let AdamParams {
                    beta1,
                    beta2,
                    epsilon,
                } = self.adam;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                grads.dense_embedding(&mut self.dense_embedding);
                let segments: [(&mut [f64], &[f64]); 3] = [
                    (&mut tower.embedding, &self.dense_embedding),
                    (&mut tower.projection, &grads.projection),
                    (&mut tower.bias, &grads.bias),
                ];
                let mut offset = 0;
                for (params, g) in segments {
                    let m = &mut self.m[offset..offset + params.len()];
                    let v = &mut self.v[offset..offset + params.len()];
                    for i in 0..params.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        params[i] -= lr * mh / (vh.sqrt() + epsilon);
                    }
                    offset += params.len();
                }
            }
        }
    }
}
