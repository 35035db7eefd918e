//! Conditional probability paths for flow-matching targets.
//!
//! Two paths are provided. The Gaussian optimal-transport path starts from
//! noise and is kept as a reference. The dynamic path starts from the previous
//! atmospheric state, so its target velocity is the plain difference `x1 - x0`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PathError {
    #[error("shape mismatch: {0} vs {1} elements")]
    Shape(usize, usize),
    #[error("flow time {0} outside [0, 1]")]
    Time(f64),
    #[error("sigma_min > 0 requires a noise sample")]
    MissingNoise,
    #[error("sigma_min must be non-negative, got {0}")]
    Sigma(f64),
    #[error("the optimal-transport path needs sigma_min > 0 outside deterministic use")]
    DegenerateOt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    OptimalTransport,
    DynamicTransport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams {
    pub kind: PathKind,
    pub sigma_min: f64,
}

impl PathParams {
    pub fn new(kind: PathKind, sigma_min: f64) -> Result<Self, PathError> {
        if !(sigma_min >= 0.0) || !sigma_min.is_finite() {
            return Err(PathError::Sigma(sigma_min));
        }
        if kind == PathKind::OptimalTransport && sigma_min == 0.0 {
            return Err(PathError::DegenerateOt);
        }
        Ok(Self { kind, sigma_min })
    }

    /// Deterministic dynamic transport, the forecasting default.
    pub fn deterministic() -> Self {
        Self {
            kind: PathKind::DynamicTransport,
            sigma_min: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub u_target: Vec<f64>,
}

fn check(a: &[f64], b: &[f64], t: f64) -> Result<(), PathError> {
    if a.len() != b.len() {
        return Err(PathError::Shape(a.len(), b.len()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(PathError::Time(t));
    }
    Ok(())
}

/// Linear Gaussian path from noise to `x1`.
pub fn ot_path_sample(
    x_noise: &[f64],
    x1: &[f64],
    t: f64,
    sigma_min: f64,
) -> Result<PathSample, PathError> {
    check(x_noise, x1, t)?;
    if sigma_min < 0.0 {
        return Err(PathError::Sigma(sigma_min));
    }
    let a = 1.0 - sigma_min;
    let s = 1.0 - a * t;
    let x_t = x_noise.iter().zip(x1).map(|(&n, &x)| t * x + s * n).collect();
    let u_target = x_noise.iter().zip(x1).map(|(&n, &x)| x - a * n).collect();
    Ok(PathSample { x_t, t, u_target })
}

/// Path from the prior state `x0` to `x1`, optionally blurred by `sigma_min * noise`.
pub fn dynamic_path_sample(
    x0: &[f64],
    x1: &[f64],
    t: f64,
    sigma_min: f64,
    noise: Option<&[f64]>,
) -> Result<PathSample, PathError> {
    check(x0, x1, t)?;
    if sigma_min < 0.0 {
        return Err(PathError::Sigma(sigma_min));
    }
    let noise = match (sigma_min > 0.0, noise) {
        (true, None) => return Err(PathError::MissingNoise),
        (true, Some(n)) => {
            if n.len() != x0.len() {
                return Err(PathError::Shape(x0.len(), n.len()));
            }
            Some(n)
        }
        (false, _) => None,
    };
    let x_t = (0..x0.len())
        .map(|i| {
            let base = t * x1[i] + (1.0 - t) * x0[i];
            match noise {
                Some(n) => base + sigma_min * n[i],
                None => base,
            }
        })
        .collect();
    let u_target = x1.iter().zip(x0).map(|(&b, &a)| b - a).collect();
    Ok(PathSample { x_t, t, u_target })
}

/// Direct evaluation of the mean, scale, flow map and conditional velocity of
/// each path, written cell by cell so tests can compare against the samplers.
pub mod table {
    /// Mean of the optimal-transport path.
    pub fn ot_mu(t: f64, x1: f64) -> f64 {
        t * x1
    }

    pub fn ot_sigma(t: f64, sigma_min: f64) -> f64 {
        1.0 - (1.0 - sigma_min) * t
    }

    pub fn ot_psi(t: f64, x: f64, x1: f64, sigma_min: f64) -> f64 {
        ot_sigma(t, sigma_min) * x + ot_mu(t, x1)
    }

    /// Conditional velocity field u_t(x | x1) at an arbitrary point x.
    pub fn ot_u(t: f64, x: f64, x1: f64, sigma_min: f64) -> f64 {
        (x1 - (1.0 - sigma_min) * x) / (1.0 - (1.0 - sigma_min) * t)
    }

    pub fn dt_mu(t: f64, x0: f64, x1: f64) -> f64 {
        t * x1 + (1.0 - t) * x0
    }

    pub fn dt_sigma(_t: f64, sigma_min: f64) -> f64 {
        sigma_min
    }

    pub fn dt_psi(t: f64, eps: f64, x0: f64, x1: f64, sigma_min: f64) -> f64 {
        dt_mu(t, x0, x1) + dt_sigma(t, sigma_min) * eps
    }

    /// The dynamic path is a translation in t, so its velocity does not depend on x.
    pub fn dt_u(_t: f64, _x: f64, x0: f64, x1: f64) -> f64 {
        x1 - x0
    }
}

/// Largest absolute disagreement between the samplers and the cell-by-cell
/// table evaluation over `trials` random cases of length `len`.
pub fn path_tables_max_error(trials: usize, len: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x0: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x1: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let eps: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t: f64 = rng.random_range(0.0..1.0);
        let sigma_min: f64 = rng.random_range(0.0..0.5);

        let ot = ot_path_sample(&eps, &x1, t, sigma_min).expect("valid inputs");
        let dt = dynamic_path_sample(&x0, &x1, t, sigma_min, Some(&eps)).expect("valid inputs");
        for i in 0..len {
            let psi = table::ot_psi(t, eps[i], x1[i], sigma_min);
            worst = worst.max((ot.x_t[i] - psi).abs());
            worst = worst.max((ot.u_target[i] - table::ot_u(t, psi, x1[i], sigma_min)).abs());
            let psi = table::dt_psi(t, eps[i], x0[i], x1[i], sigma_min);
            worst = worst.max((dt.x_t[i] - psi).abs());
            worst = worst.max((dt.u_target[i] - table::dt_u(t, psi, x0[i], x1[i])).abs());
        }
    }
    worst
}

pub fn path_tables_agree() -> bool {
    path_tables_max_error(100, 8, 0) < 1e-12
}
