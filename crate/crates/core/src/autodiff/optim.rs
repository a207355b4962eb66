use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

/// Optimizer hyperparameters and per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::with_kind(OptimizerKind::Sgd, learning_rate, 0.0)
    }

    /// AdamW with beta1 0.9, beta2 0.999, eps 1e-8 and weight decay 1e-2.
    pub fn adamw(learning_rate: f64) -> Self {
        Self::with_kind(OptimizerKind::AdamW, learning_rate, 1e-2)
    }

    pub fn with_kind(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. `grads[i]` must cover `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::MissingGradient(grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            match g {
                Some(g) if g.len() == p.numel() => {}
                _ => return Err(Error::MissingGradient(i)),
            }
        }
        if self.kind == OptimizerKind::AdamW && self.first_moment.len() != params.len() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        let mut updated: Vec<Vec<f64>> = Vec::with_capacity(params.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter().zip(grads) {
                    let g = g.as_deref().unwrap_or_default();
                    let wd = self.weight_decay;
                    updated.push(p.data().iter().zip(g).map(|(w, d)| w - lr * (d + wd * w)).collect());
                }
            }
            OptimizerKind::AdamW => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for (i, (p, g)) in params.iter().zip(grads).enumerate() {
                    let g = g.as_deref().unwrap_or_default();
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    let mut out = Vec::with_capacity(p.numel());
                    for k in 0..g.len() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                        let mhat = m[k] / bc1;
                        let vhat = v[k] / bc2;
                        let w = p.data()[k];
                        out.push(w - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w));
                    }
                    updated.push(out);
                }
            }
        }
        if updated.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("optimizer update".into()));
        }
        for (p, u) in params.iter_mut().zip(updated) {
            p.data_mut().copy_from_slice(&u);
        }
        Ok(())
    }
}
