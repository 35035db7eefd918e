use std::sync::Arc;

use thiserror::Error;

use crate::grid::{GridSpec, VariableRegistry};

#[derive(Debug, Error, PartialEq)]
pub enum WeightError {
    #[error("zero variance of the temporal difference in channel {0}")]
    ZeroVariance(String),
    #[error("need at least 2 pairs, found {0}")]
    TooFewPairs(usize),
    #[error("size mismatch: expected {expected}, found {found}")]
    Size { expected: usize, found: usize },
    #[error("forecast and truth sequences differ in length ({0} vs {1})")]
    Length(usize, usize),
}

/// Lead-time weight `(1 + tau / 24)^(-1/2)`, `tau` in hours.
pub fn w_tau(tau_hours: f64) -> f64 {
    (1.0 + tau_hours / 24.0).powf(-0.5)
}

/// Pressure-proportional level weights: `p / mean(p)` for upper-air channels,
/// 1 for surface channels, then rescaled to unit mean over all channels.
pub fn level_weights(registry: &VariableRegistry) -> Vec<f64> {
    let mean_p = registry.levels.iter().map(|&p| p as f64).sum::<f64>() / registry.levels.len().max(1) as f64;
    let raw: Vec<f64> = registry
        .channels()
        .iter()
        .map(|c| c.level.map_or(1.0, |p| p as f64 / mean_p))
        .collect();
    let m = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter().map(|w| w / m).collect()
}

/// Per-channel inverse population variance of `later - earlier` over all
/// pairs and grid points. Inputs are flat `C x H x W` arrays.
pub fn compute_w_var<'a>(
    pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>,
    registry: &VariableRegistry,
    plane: usize,
) -> Result<Vec<f64>, WeightError> {
    let c = registry.n_channels();
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut count = 0usize;
    let mut diffs: Vec<Vec<f64>> = Vec::new();
    for (a, b) in pairs {
        if a.len() != c * plane || b.len() != c * plane {
            return Err(WeightError::Size {
                expected: c * plane,
                found: a.len().min(b.len()),
            });
        }
        let d: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
        for ch in 0..c {
            sum[ch] += d[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
        diffs.push(d);
        count += 1;
    }
    if count < 2 {
        return Err(WeightError::TooFewPairs(count));
    }
    let n = (count * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    for d in &diffs {
        for ch in 0..c {
            sq[ch] += d[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    let names = registry.channel_names();
    sq.iter()
        .enumerate()
        .map(|(ch, s)| {
            let var = s / n;
            if var > 0.0 && var.is_finite() {
                Ok(1.0 / var)
            } else {
                Err(WeightError::ZeroVariance(names[ch].clone()))
            }
        })
        .collect()
}

/// Latitude, level and variable weights, with the lead-time weight as a function.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightScheme {
    pub w_lat: Vec<f64>,
    pub w_lev: Vec<f64>,
    pub w_var: Vec<f64>,
    pub n_lon: usize,
    /// Product `w_lat(i) * w_lev(c) * w_var(c)` per element of a `C x H x W` state.
    pub element: Arc<Vec<f64>>,
}

impl WeightScheme {
    pub fn new(w_lat: Vec<f64>, w_lev: Vec<f64>, w_var: Vec<f64>, n_lon: usize) -> Result<Self, WeightError> {
        if w_lev.len() != w_var.len() {
            return Err(WeightError::Size {
                expected: w_lev.len(),
                found: w_var.len(),
            });
        }
        let h = w_lat.len();
        let mut element = Vec::with_capacity(w_lev.len() * h * n_lon);
        for c in 0..w_lev.len() {
            for &wl in &w_lat {
                let w = wl * w_lev[c] * w_var[c];
                element.extend(std::iter::repeat_n(w, n_lon));
            }
        }
        Ok(Self {
            w_lat,
            w_lev,
            w_var,
            n_lon,
            element: Arc::new(element),
        })
    }

    /// All weights equal to one.
    pub fn uniform(channels: usize, n_lat: usize, n_lon: usize) -> Self {
        Self::new(vec![1.0; n_lat], vec![1.0; channels], vec![1.0; channels], n_lon).expect("consistent sizes")
    }

    pub fn for_data(grid: &GridSpec, registry: &VariableRegistry, w_var: Vec<f64>) -> Result<Self, WeightError> {
        Self::new(grid.latitude_weights(), level_weights(registry), w_var, grid.n_lon())
    }

    pub fn len(&self) -> usize {
        self.element.len()
    }

    pub fn is_empty(&self) -> bool {
        self.element.is_empty()
    }

    pub fn w_tau(&self, tau_hours: f64) -> f64 {
        w_tau(tau_hours)
    }
}

/// Weighted mean squared difference over all `C x H x W` elements.
pub fn weighted_mse(pred: &[f64], target: &[f64], weights: &WeightScheme) -> Result<f64, WeightError> {
    let n = weights.len();
    if pred.len() != n || target.len() != n {
        return Err(WeightError::Size {
            expected: n,
            found: pred.len().min(target.len()),
        });
    }
    Ok(pred
        .iter()
        .zip(target)
        .zip(weights.element.iter())
        .map(|((p, t), w)| w * (p - t) * (p - t))
        .sum::<f64>()
        / n as f64)
}

/// Flow-matching loss against the finite-difference target `x_k6 - x_k`.
pub fn stage1_loss(v_pred: &[f64], x_k: &[f64], x_k6: &[f64], weights: &WeightScheme) -> Result<f64, WeightError> {
    if x_k.len() != x_k6.len() {
        return Err(WeightError::Size {
            expected: x_k.len(),
            found: x_k6.len(),
        });
    }
    let target: Vec<f64> = x_k6.iter().zip(x_k).map(|(b, a)| b - a).collect();
    weighted_mse(v_pred, &target, weights)
}

/// Rollout loss `sum_tau w_tau * mse(forecast_tau, truth_tau)` with `tau = 1..T` hours.
pub fn stage2_loss(forecasts: &[Vec<f64>], truths: &[Vec<f64>], weights: &WeightScheme) -> Result<f64, WeightError> {
    if forecasts.len() != truths.len() {
        return Err(WeightError::Length(forecasts.len(), truths.len()));
    }
    let mut total = 0.0;
    for (k, (f, t)) in forecasts.iter().zip(truths).enumerate() {
        total += w_tau((k + 1) as f64) * weighted_mse(f, t, weights)?;
    }
    Ok(total)
}
