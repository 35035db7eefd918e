//! Explicit Euler integration of a velocity field in hourly blocks.
//!
//! One block advances the state by `steps_per_block` hours. Inside a block the
//! flow time runs `t_n = (n - 1) / steps_per_block` and resets to zero at the
//! start of the next block, whose initial state is the previous block's last.

use chrono::{DateTime, Duration, Utc};
use thiserror::Error;

use crate::conditioning::{CondError, StaticChannels, StaticSource};
use crate::dataset::Dataset;
use crate::grid::{GridSpec, VariableRegistry};
use crate::net::{NetError, VelocityNet};

#[derive(Debug, Error, PartialEq)]
pub enum OdeError {
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Cond(#[from] CondError),
    #[error("invalid rollout configuration: {0}")]
    Config(String),
}

/// Anything that maps (state, flow time, conditioning) to a velocity.
pub trait VelocityField {
    fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>, OdeError>;
}

impl VelocityField for VelocityNet {
    fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>, OdeError> {
        Ok(self.evaluate(x, t, cond)?)
    }
}

impl<F> VelocityField for F
where
    F: Fn(&[f64], f64, &[f64]) -> Vec<f64>,
{
    fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>, OdeError> {
        Ok(self(x, t, cond))
    }
}

/// Conditioning channels at a wall-clock time.
pub trait ConditionProvider {
    fn cond_at(&self, time: DateTime<Utc>) -> Result<Vec<f64>, OdeError>;
}

/// Conditioning that never changes; handy for tests and toy fields.
pub struct FixedCondition(pub Vec<f64>);

impl ConditionProvider for FixedCondition {
    fn cond_at(&self, _time: DateTime<Utc>) -> Result<Vec<f64>, OdeError> {
        Ok(self.0.clone())
    }
}

/// Static fields plus clock channels evaluated on a grid.
#[derive(Debug, Clone)]
pub struct GridConditions {
    pub grid: GridSpec,
    pub registry: VariableRegistry,
    pub statics: StaticChannels,
}

impl GridConditions {
    pub fn new(grid: &GridSpec, registry: &VariableRegistry, source: &impl StaticSource) -> Result<Self, OdeError> {
        Ok(Self {
            grid: grid.clone(),
            registry: registry.clone(),
            statics: StaticChannels::build(grid, registry, source)?,
        })
    }

    pub fn for_dataset(ds: &Dataset) -> Result<Self, OdeError> {
        Self::new(&ds.grid, &ds.registry, ds)
    }
}

impl ConditionProvider for GridConditions {
    fn cond_at(&self, time: DateTime<Utc>) -> Result<Vec<f64>, OdeError> {
        Ok(self.statics.at(&self.grid, &self.registry, &time)?.into_raw_vec_and_offset().0)
    }
}

/// One explicit update `x + dt * v`. Other schemes can slot in here.
pub trait Stepper {
    fn step(
        &self,
        field: &dyn VelocityField,
        x: &[f64],
        t: f64,
        dt: f64,
        cond: &[f64],
    ) -> Result<Vec<f64>, OdeError>;
}

pub struct Euler;

impl Stepper for Euler {
    fn step(
        &self,
        field: &dyn VelocityField,
        x: &[f64],
        t: f64,
        dt: f64,
        cond: &[f64],
    ) -> Result<Vec<f64>, OdeError> {
        let v = field.velocity(x, t, cond)?;
        Ok(x.iter().zip(&v).map(|(a, b)| a + dt * b).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub steps_per_block: usize,
    pub delta_t: f64,
    pub horizon_hours: usize,
    /// Recompute clock channels at each hourly substep rather than once per block.
    pub clock_per_substep: bool,
}

impl RolloutConfig {
    pub fn hourly(horizon_hours: usize) -> Self {
        Self {
            steps_per_block: 6,
            delta_t: 1.0 / 6.0,
            horizon_hours,
            clock_per_substep: true,
        }
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        if self.steps_per_block == 0 {
            return Err(OdeError::Config("steps_per_block must be positive".into()));
        }
        if (self.steps_per_block as f64 * self.delta_t - 1.0).abs() > 1e-12 {
            return Err(OdeError::Config(format!(
                "steps_per_block * delta_t = {} must equal 1",
                self.steps_per_block as f64 * self.delta_t
            )));
        }
        Ok(())
    }
}

/// Flow times `(n - 1) / steps` presented to the model within one block.
pub fn substep_times(steps: usize) -> Vec<f64> {
    (0..steps).map(|n| n as f64 / steps as f64).collect()
}

/// Wall-clock time of substep `n` (0-based) in a block starting at `start`.
pub fn substep_clock(start: DateTime<Utc>, n: usize, cfg: &RolloutConfig) -> DateTime<Utc> {
    if cfg.clock_per_substep {
        start + Duration::hours(n as i64)
    } else {
        start
    }
}

/// Flow time and conditioning clock of every model evaluation in a rollout
/// of `horizon` hours from `init`, in order.
pub fn substep_schedule(init: DateTime<Utc>, cfg: &RolloutConfig, horizon: usize) -> Vec<(f64, DateTime<Utc>)> {
    let times = substep_times(cfg.steps_per_block);
    (0..horizon)
        .map(|j| {
            let (block, n) = (j / cfg.steps_per_block, j % cfg.steps_per_block);
            let start = init + Duration::hours((block * cfg.steps_per_block) as i64);
            (times[n], substep_clock(start, n, cfg))
        })
        .collect()
}

/// States `X_{k+1..k+steps}` from `X_k`, `steps <= steps_per_block`.
pub fn euler_block(
    field: &dyn VelocityField,
    x_k: &[f64],
    start: DateTime<Utc>,
    provider: &dyn ConditionProvider,
    cfg: &RolloutConfig,
    steps: usize,
    first_step_index: usize,
) -> Result<Vec<Vec<f64>>, OdeError> {
    cfg.validate()?;
    let times = substep_times(cfg.steps_per_block);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut cond = provider.cond_at(start)?;
    for (n, &t) in times.iter().take(steps).enumerate() {
        if cfg.clock_per_substep && n > 0 {
            cond = provider.cond_at(substep_clock(start, n, cfg))?;
        }
        let x = out.last().map(Vec::as_slice).unwrap_or(x_k);
        let next = Euler.step(field, x, t, cfg.delta_t, &cond)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::NonFinite {
                step: first_step_index + n + 1,
            });
        }
        out.push(next);
    }
    Ok(out)
}

/// Hourly trajectory `X_1..X_N`. A horizon that is not a multiple of the
/// block length ends with a truncated block.
pub fn rollout(
    field: &dyn VelocityField,
    x0: &[f64],
    init_time: DateTime<Utc>,
    provider: &dyn ConditionProvider,
    cfg: &RolloutConfig,
) -> Result<Vec<Vec<f64>>, OdeError> {
    cfg.validate()?;
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(cfg.horizon_hours);
    while states.len() < cfg.horizon_hours {
        let done = states.len();
        let steps = cfg.steps_per_block.min(cfg.horizon_hours - done);
        let start = init_time + Duration::hours(done as i64);
        let x = states.last().map(Vec::as_slice).unwrap_or(x0);
        let block = euler_block(field, x, start, provider, cfg, steps, done)?;
        states.extend(block);
    }
    Ok(states)
}

/// Global errors of Euler integration over `[0, t_end]` at several step sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub rows: Vec<(f64, f64)>,
    /// Least-squares slope of log(error) against log(dt); `None` when any error is zero.
    pub slope: Option<f64>,
}

pub fn solve_convergence_probe(
    velocity: impl Fn(&[f64], f64) -> Vec<f64>,
    x0: &[f64],
    t_end: f64,
    dts: &[f64],
    exact: impl Fn(f64) -> Vec<f64>,
) -> ConvergenceTable {
    let truth = exact(t_end);
    let rows: Vec<(f64, f64)> = dts
        .iter()
        .map(|&dt| {
            let n = (t_end / dt).round() as usize;
            let mut x = x0.to_vec();
            for k in 0..n {
                let v = velocity(&x, k as f64 * dt);
                for (a, b) in x.iter_mut().zip(&v) {
                    *a += dt * b;
                }
            }
            let err = x
                .iter()
                .zip(&truth)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            (dt, err)
        })
        .collect();
    let slope = if rows.len() >= 2 && rows.iter().all(|&(_, e)| e > 0.0) {
        let pts: Vec<(f64, f64)> = rows.iter().map(|&(d, e)| (d.ln(), e.ln())).collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    ConvergenceTable { rows, slope }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use std::cell::RefCell;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn constant_field_telescopes() {
        let w = [0.5, -2.0];
        let field = |_: &[f64], _: f64, _: &[f64]| w.to_vec();
        let cfg = RolloutConfig::hourly(12);
        let out = rollout(&field, &[1.0, 1.0], t0(), &FixedCondition(vec![]), &cfg).unwrap();
        assert_eq!(out.len(), 12);
        for (n, x) in out.iter().enumerate().take(6) {
            let k = (n + 1) as f64 / 6.0;
            assert!((x[0] - (1.0 + k * 0.5)).abs() < 1e-14);
        }
        assert!((out[5][1] - (1.0 - 2.0)).abs() < 1e-14);
        assert!((out[11][0] - 2.0).abs() < 1e-14);
        assert!((out[11][1] + 3.0).abs() < 1e-14);
    }

    #[test]
    fn flow_times_reset_every_block() {
        let seen = RefCell::new(Vec::new());
        let field = |x: &[f64], t: f64, _: &[f64]| {
            seen.borrow_mut().push(t);
            vec![0.0; x.len()]
        };
        let cfg = RolloutConfig::hourly(12);
        rollout(&field, &[0.0], t0(), &FixedCondition(vec![]), &cfg).unwrap();
        let ts = seen.into_inner();
        assert_eq!(ts.len(), 12);
        let want = [0.0, 1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0, 4.0 / 6.0, 5.0 / 6.0];
        assert_eq!(&ts[..6], &want);
        assert_eq!(&ts[6..], &want);
    }

    #[test]
    fn truncated_last_block() {
        let calls = RefCell::new(0);
        let field = |x: &[f64], _: f64, _: &[f64]| {
            *calls.borrow_mut() += 1;
            vec![1.0; x.len()]
        };
        let cfg = RolloutConfig::hourly(8);
        let out = rollout(&field, &[0.0], t0(), &FixedCondition(vec![]), &cfg).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(*calls.borrow(), 8);
    }

    #[test]
    fn linear_target_recovers_endpoint_and_interpolants() {
        let (a, b) = (vec![1.0, -3.0], vec![4.0, 0.5]);
        let diff: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
        let field = move |_: &[f64], _: f64, _: &[f64]| diff.clone();
        let out = rollout(&field, &a, t0(), &FixedCondition(vec![]), &RolloutConfig::hourly(6)).unwrap();
        for (n, x) in out.iter().enumerate() {
            let s = (n + 1) as f64 / 6.0;
            for i in 0..2 {
                assert!((x[i] - ((1.0 - s) * a[i] + s * b[i])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn non_finite_state_reports_step() {
        let field = |x: &[f64], t: f64, _: &[f64]| {
            if t > 0.3 {
                vec![f64::NAN; x.len()]
            } else {
                vec![0.0; x.len()]
            }
        };
        let err = rollout(&field, &[0.0], t0(), &FixedCondition(vec![]), &RolloutConfig::hourly(6)).unwrap_err();
        assert_eq!(err, OdeError::NonFinite { step: 3 });
    }

    #[test]
    fn clock_advances_each_substep() {
        struct Recorder(RefCell<Vec<DateTime<Utc>>>);
        impl ConditionProvider for Recorder {
            fn cond_at(&self, time: DateTime<Utc>) -> Result<Vec<f64>, OdeError> {
                self.0.borrow_mut().push(time);
                Ok(vec![])
            }
        }
        let field = |x: &[f64], _: f64, _: &[f64]| vec![0.0; x.len()];
        let rec = Recorder(RefCell::new(Vec::new()));
        rollout(&field, &[0.0], t0(), &rec, &RolloutConfig::hourly(12)).unwrap();
        let times = rec.0.into_inner();
        assert_eq!(times.len(), 12);
        assert_eq!(times[7], t0() + Duration::hours(7));
        let sched: Vec<_> = substep_schedule(t0(), &RolloutConfig::hourly(12), 12).into_iter().map(|s| s.1).collect();
        assert_eq!(sched, times);

        let rec = Recorder(RefCell::new(Vec::new()));
        let mut cfg = RolloutConfig::hourly(12);
        cfg.clock_per_substep = false;
        rollout(&field, &[0.0], t0(), &rec, &cfg).unwrap();
        assert_eq!(rec.0.into_inner(), vec![t0(), t0() + Duration::hours(6)]);
    }

    #[test]
    fn convergence_probe_cases() {
        let dts = [1.0 / 6.0, 1.0 / 12.0, 1.0 / 24.0];
        let growth = solve_convergence_probe(|x, _| x.to_vec(), &[1.0], 1.0, &dts, |t| vec![t.exp()]);
        let slope = growth.slope.unwrap();
        assert!((0.8..=1.2).contains(&slope), "{slope}");
        let still = solve_convergence_probe(|x, _| vec![0.0; x.len()], &[2.0], 1.0, &dts, |_| vec![2.0]);
        assert!(still.rows.iter().all(|&(_, e)| e == 0.0));
        assert!(still.slope.is_none());
        let tau = std::f64::consts::TAU;
        // Sample the quarter period, where the Euler error is first order.
        let wave = solve_convergence_probe(
            |_, t| vec![(tau * t).cos()],
            &[0.0],
            0.25,
            &[1.0 / 24.0, 1.0 / 48.0, 1.0 / 96.0],
            |t| vec![(tau * t).sin() / tau],
        );
        let slope = wave.slope.unwrap();
        assert!((0.8..=1.2).contains(&slope), "{slope}");
    }
}
