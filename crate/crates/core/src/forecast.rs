//! Hourly forecasts from a trained network.

use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::Duration;
use ndarray::Array3;
use thiserror::Error;

use crate::checkpoint::{load_model, Archive, CheckpointError, PARAM_PREFIX};
use crate::grid::{GridError, GridSpec, NormStats, StateField, VariableRegistry};
use crate::net::{NetError, VelocityNet};
use crate::ode::{rollout, GridConditions, OdeError, RolloutConfig, VelocityField};
use crate::train::{TrainConfig, EMA_PREFIX};

/// Default cap on the forecast horizon.
pub const MAX_HORIZON_HOURS: usize = 120;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("non-finite state at lead hour {0}")]
    NonFinite(usize),
    #[error("horizon {0} h exceeds the cap of {1} h")]
    Horizon(usize, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ode(OdeError),
}

impl From<OdeError> for ForecastError {
    fn from(e: OdeError) -> Self {
        match e {
            OdeError::NonFinite { step } => ForecastError::NonFinite(step),
            e => ForecastError::Ode(e),
        }
    }
}

/// Counts velocity evaluations of the wrapped field.
pub struct Counted<'a, F: ?Sized> {
    pub inner: &'a F,
    pub calls: AtomicUsize,
}

impl<'a, F: VelocityField + ?Sized> Counted<'a, F> {
    pub fn new(inner: &'a F) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Counted<'_, F> {
    fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>, OdeError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.velocity(x, t, cond)
    }
}

/// A network with the normalization and rollout settings it was trained with.
pub struct Forecaster {
    pub net: VelocityNet,
    pub stats: NormStats,
    pub rollout: RolloutConfig,
}

#[derive(Debug, Clone)]
pub struct Forecast {
    /// Physical-unit states at lead hours `1..=horizon`.
    pub states: Vec<StateField>,
    pub model_evaluations: usize,
}

impl Forecaster {
    pub fn new(net: VelocityNet, stats: NormStats, block_hours: usize, clock_per_substep: bool) -> Self {
        Self {
            net,
            stats,
            rollout: RolloutConfig {
                steps_per_block: block_hours,
                delta_t: 1.0 / block_hours as f64,
                horizon_hours: 0,
                clock_per_substep,
            },
        }
    }

    /// Loads a training checkpoint, preferring the averaged weights.
    pub fn from_checkpoint(archive: &Archive) -> Result<Self, ForecastError> {
        let prefix = if archive.group(EMA_PREFIX).is_empty() {
            PARAM_PREFIX
        } else {
            EMA_PREFIX
        };
        let net = load_model(archive, prefix)?;
        let stats_text = archive
            .meta
            .get("norm_stats")
            .and_then(|v| v.as_str())
            .ok_or_else(|| CheckpointError::Corrupt("no normalization statistics".into()))?;
        let stats = NormStats::from_text(stats_text)?;
        let train: TrainConfig = match archive.meta.get("train") {
            Some(v) => serde_json::from_value(v.clone()).map_err(CheckpointError::from)?,
            None => TrainConfig::default(),
        };
        Ok(Self::new(net, stats, train.block_hours, train.clock_per_substep))
    }

    pub fn forecast(
        &self,
        init: &StateField,
        grid: &GridSpec,
        registry: &VariableRegistry,
        conditions: &GridConditions,
        horizon_hours: usize,
    ) -> Result<Forecast, ForecastError> {
        if horizon_hours > MAX_HORIZON_HOURS {
            return Err(ForecastError::Horizon(horizon_hours, MAX_HORIZON_HOURS));
        }
        self.net.config.matches(grid, registry)?;
        init.check(grid, registry)?;
        let x0 = if init.normalized {
            init.clone()
        } else {
            self.stats.normalize(init)?
        };
        let shape = x0.values.dim();
        let cfg = RolloutConfig {
            horizon_hours,
            ..self.rollout
        };
        let field = Counted::new(&self.net);
        let flat = x0.values.as_standard_layout().iter().copied().collect::<Vec<f64>>();
        let traj = rollout(&field, &flat, init.timestamp, conditions, &cfg)?;
        let mut states = Vec::with_capacity(traj.len());
        for (k, x) in traj.into_iter().enumerate() {
            let values = Array3::from_shape_vec(shape, x).expect("state length matches");
            let s = StateField::new(values, init.timestamp + Duration::hours(k as i64 + 1), true);
            let phys = self.stats.denormalize(&s)?;
            if phys.values.iter().any(|v| !v.is_finite()) {
                return Err(ForecastError::NonFinite(k + 1));
            }
            states.push(phys);
        }
        Ok(Forecast {
            states,
            model_evaluations: field.count(),
        })
    }
}
