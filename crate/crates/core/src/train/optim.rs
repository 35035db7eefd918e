use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("parameter {index}: shape {expected:?} vs {found:?}")]
    Shape {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("expected {expected} tensors, found {found}")]
    Count { expected: usize, found: usize },
}

fn check_shapes(a: &[Tensor], b: &[Tensor]) -> Result<(), OptimError> {
    if a.len() != b.len() {
        return Err(OptimError::Count {
            expected: a.len(),
            found: b.len(),
        });
    }
    for (index, (x, y)) in a.iter().zip(b).enumerate() {
        if x.shape != y.shape {
            return Err(OptimError::Shape {
                index,
                expected: x.shape.clone(),
                found: y.shape.clone(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Learning rate at `step` of `total` under the schedule.
pub fn learning_rate(schedule: Schedule, base: f64, min: f64, step: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let frac = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
            min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// AdamW with decoupled weight decay applied to matrices only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<(), OptimError> {
        check_shapes(&self.m, params)?;
        if grads.len() != params.len() {
            return Err(OptimError::Count {
                expected: params.len(),
                found: grads.len(),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.shape.len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[i].data, &mut self.v[i].data, &grads[i]);
            for k in 0..p.data.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p.data[k] -= lr * (mh / (vh.sqrt() + self.eps) + decay * p.data[k]);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales gradients down so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    /// Ramp the decay up as `min(decay, (1 + n) / (10 + n))`.
    pub warmup: bool,
    pub updates: u64,
    pub shadow: Vec<Tensor>,
}

impl EmaState {
    pub fn new(params: &[Tensor], decay: f64, warmup: bool) -> Self {
        Self {
            decay,
            warmup,
            updates: 0,
            shadow: params.to_vec(),
        }
    }

    pub fn current_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }

    pub fn update(&mut self, params: &[Tensor]) -> Result<(), OptimError> {
        check_shapes(&self.shadow, params)?;
        let d = self.current_decay();
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (a, b) in s.data.iter_mut().zip(&p.data) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        self.updates += 1;
        Ok(())
    }
}
