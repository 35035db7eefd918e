//! Lat-lon grids, variable registries, gridded states and their normalization.
//!
//! Channel order is fixed everywhere in the crate: surface variables first, then
//! pressure-level variables variable-major, level-minor. Levels run from the top
//! of the atmosphere downward (increasing pressure).

use chrono::{DateTime, Utc};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid registry: {0}")]
    InvalidRegistry(String),
    #[error("state shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("state contains non-finite value in channel {channel}")]
    NonFinite { channel: String },
    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: String },
    #[error("need at least {needed} states, got {got}")]
    TooFewStates { needed: usize, got: usize },
    #[error("state is already {0}")]
    NormalizationFlag(&'static str),
    #[error("statistics cover {stats} channels, state has {state}")]
    ChannelCount { stats: usize, state: usize },
    #[error("precipitation must be non-negative, got {0}")]
    NegativePrecipitation(f64),
}

const LON_TOL: f64 = 1e-9;

/// A regular global latitude-longitude grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    latitudes: Vec<f64>,
    longitudes: Vec<f64>,
}

impl GridSpec {
    pub fn new(latitudes: Vec<f64>, longitudes: Vec<f64>) -> Result<Self, GridError> {
        if latitudes.len() < 2 {
            return Err(GridError::InvalidGrid(format!(
                "need at least 2 latitude rows, got {}",
                latitudes.len()
            )));
        }
        if longitudes.len() < 4 {
            return Err(GridError::InvalidGrid(format!(
                "need at least 4 longitude columns, got {}",
                longitudes.len()
            )));
        }
        if latitudes.iter().any(|l| !l.is_finite() || l.abs() > 90.0) {
            return Err(GridError::InvalidGrid("latitudes must lie in [-90, 90]".into()));
        }
        let increasing = latitudes[1] > latitudes[0];
        let monotone = latitudes
            .windows(2)
            .all(|w| if increasing { w[1] > w[0] } else { w[1] < w[0] });
        if !monotone {
            return Err(GridError::InvalidGrid("latitudes must be strictly monotone".into()));
        }
        if longitudes.iter().any(|l| !l.is_finite() || *l < 0.0 || *l >= 360.0) {
            return Err(GridError::InvalidGrid("longitudes must lie in [0, 360)".into()));
        }
        let spacing = 360.0 / longitudes.len() as f64;
        for (j, lon) in longitudes.iter().enumerate() {
            let expected = longitudes[0] + spacing * j as f64;
            if (lon - expected).abs() > LON_TOL {
                return Err(GridError::InvalidGrid(format!(
                    "longitude {j} is {lon}, expected {expected} for a uniform global grid"
                )));
            }
        }
        Ok(Self { latitudes, longitudes })
    }

    /// Equiangular global grid. With `include_poles` the first and last rows sit on
    /// the poles (the 181x360 layout); otherwise rows are cell centres.
    pub fn regular(n_lat: usize, n_lon: usize, include_poles: bool) -> Result<Self, GridError> {
        if n_lat < 2 || n_lon < 4 {
            return Err(GridError::InvalidGrid(format!("degenerate grid {n_lat}x{n_lon}")));
        }
        let latitudes = if include_poles {
            let d = 180.0 / (n_lat - 1) as f64;
            (0..n_lat).map(|i| 90.0 - d * i as f64).collect()
        } else {
            let d = 180.0 / n_lat as f64;
            (0..n_lat).map(|i| 90.0 - d * (i as f64 + 0.5)).collect()
        };
        let dl = 360.0 / n_lon as f64;
        let longitudes = (0..n_lon).map(|j| dl * j as f64).collect();
        Self::new(latitudes, longitudes)
    }

    pub fn n_lat(&self) -> usize {
        self.latitudes.len()
    }

    pub fn n_lon(&self) -> usize {
        self.longitudes.len()
    }

    pub fn latitudes(&self) -> &[f64] {
        &self.latitudes
    }

    pub fn longitudes(&self) -> &[f64] {
        &self.longitudes
    }

    /// Longitude spacing in degrees.
    pub fn lon_spacing(&self) -> f64 {
        360.0 / self.n_lon() as f64
    }

    /// Area weights per latitude row, unit mean over the grid.
    pub fn latitude_weights(&self) -> Vec<f64> {
        latitude_weights(&self.latitudes)
    }
}

/// Area-proportional latitude weights normalized to unit mean.
///
/// Interior rows weigh `cos(lat)`. A row sitting on a pole represents only the
/// half cell between the pole and the neighbouring row boundary; on the same
/// scale its area is `tan(d/4) / 2`, `d` being the distance to the next row.
pub fn latitude_weights(latitudes: &[f64]) -> Vec<f64> {
    let n = latitudes.len();
    if n == 0 {
        return Vec::new();
    }
    let raw: Vec<f64> = latitudes
        .iter()
        .enumerate()
        .map(|(i, &lat)| {
            if (lat.abs() - 90.0).abs() < 1e-9 && n > 1 {
                let neighbour = if i == 0 { latitudes[1] } else { latitudes[i - 1] };
                let d = (lat - neighbour).abs().to_radians();
                0.5 * (d / 4.0).tan()
            } else {
                lat.to_radians().cos()
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    raw.iter().map(|w| w / mean).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Channel {
    pub name: String,
    pub variable: String,
    /// Pressure level in hPa for upper-air channels.
    pub level: Option<u32>,
}

/// The set of physical variables carried by a state, plus conditioning names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRegistry {
    pub surface_vars: Vec<String>,
    pub pressure_vars: Vec<String>,
    /// hPa, ordered from the top of the atmosphere downward.
    pub levels: Vec<u32>,
    pub static_vars: Vec<String>,
    pub clock_vars: Vec<String>,
}

impl VariableRegistry {
    pub fn new(
        surface_vars: Vec<String>,
        pressure_vars: Vec<String>,
        levels: Vec<u32>,
        static_vars: Vec<String>,
        clock_vars: Vec<String>,
    ) -> Result<Self, GridError> {
        let reg = Self {
            surface_vars,
            pressure_vars,
            levels,
            static_vars,
            clock_vars,
        };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let mut seen = std::collections::HashSet::new();
        for name in self
            .surface_vars
            .iter()
            .chain(&self.pressure_vars)
            .chain(&self.static_vars)
            .chain(&self.clock_vars)
        {
            if name.is_empty() || name.contains([',', ' ', '\t']) {
                return Err(GridError::InvalidRegistry(format!("bad variable name {name:?}")));
            }
            if !seen.insert(name.as_str()) {
                return Err(GridError::InvalidRegistry(format!("duplicate variable {name}")));
            }
        }
        if !self.pressure_vars.is_empty() && self.levels.is_empty() {
            return Err(GridError::InvalidRegistry("pressure variables without levels".into()));
        }
        if self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GridError::InvalidRegistry(
                "levels must be strictly increasing in pressure (top first)".into(),
            ));
        }
        if self.n_channels() == 0 {
            return Err(GridError::InvalidRegistry("registry has no channels".into()));
        }
        Ok(())
    }

    /// C = |surface| + |pressure| * |levels|.
    pub fn n_channels(&self) -> usize {
        self.surface_vars.len() + self.pressure_vars.len() * self.levels.len()
    }

    pub fn n_surface(&self) -> usize {
        self.surface_vars.len()
    }

    pub fn n_conditioning(&self) -> usize {
        self.static_vars.len() + self.clock_vars.len()
    }

    pub fn channels(&self) -> Vec<Channel> {
        let mut out: Vec<Channel> = self
            .surface_vars
            .iter()
            .map(|v| Channel {
                name: v.clone(),
                variable: v.clone(),
                level: None,
            })
            .collect();
        for v in &self.pressure_vars {
            for &l in &self.levels {
                out.push(Channel {
                    name: format!("{v}{l}"),
                    variable: v.clone(),
                    level: Some(l),
                });
            }
        }
        out
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.channels().into_iter().map(|c| c.name).collect()
    }

    pub fn surface_index(&self, var: &str) -> Option<usize> {
        self.surface_vars.iter().position(|v| v == var)
    }

    pub fn pressure_index(&self, var: &str, level: u32) -> Option<usize> {
        let v = self.pressure_vars.iter().position(|p| p == var)?;
        let l = self.levels.iter().position(|&p| p == level)?;
        Some(self.n_surface() + v * self.levels.len() + l)
    }

    /// Index of a channel by its display name (`MSLP`, `U850`, ...).
    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names().iter().position(|n| n == name)
    }
}

/// Gridded physical state at one timestamp, shape `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    pub values: Array3<f64>,
    pub timestamp: DateTime<Utc>,
    pub normalized: bool,
}

impl StateField {
    pub fn new(values: Array3<f64>, timestamp: DateTime<Utc>, normalized: bool) -> Self {
        Self {
            values,
            timestamp,
            normalized,
        }
    }

    pub fn check(&self, grid: &GridSpec, registry: &VariableRegistry) -> Result<(), GridError> {
        let expected = (registry.n_channels(), grid.n_lat(), grid.n_lon());
        let found = self.values.dim();
        if expected != found {
            return Err(GridError::ShapeMismatch { expected, found });
        }
        if let Some((c, _)) = self
            .values
            .axis_iter(Axis(0))
            .enumerate()
            .find(|(_, ch)| ch.iter().any(|v| !v.is_finite()))
        {
            return Err(GridError::NonFinite {
                channel: registry.channel_names()[c].clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelTransform {
    Identity,
    /// Log transform applied to precipitation before standardization.
    Precipitation,
}

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub transform: Vec<ChannelTransform>,
}

/// Name of the surface variable that receives the precipitation transform.
pub const PRECIP_VAR: &str = "TP";

pub fn channel_transforms(registry: &VariableRegistry) -> Vec<ChannelTransform> {
    registry
        .channels()
        .iter()
        .map(|c| {
            if c.level.is_none() && c.variable == PRECIP_VAR {
                ChannelTransform::Precipitation
            } else {
                ChannelTransform::Identity
            }
        })
        .collect()
}

const TP_SCALE: f64 = 200.0;
const TP_EXPONENT: f64 = 1.6;

/// `10 * log10(1 + 200 * tp^1.6)`.
pub fn tp_transform(tp: f64) -> Result<f64, GridError> {
    if tp < 0.0 || tp.is_nan() {
        return Err(GridError::NegativePrecipitation(tp));
    }
    let a = TP_SCALE * tp.powf(TP_EXPONENT);
    Ok(10.0 / std::f64::consts::LN_10 * a.ln_1p())
}

/// Inverse of [`tp_transform`]. Non-positive inputs map to zero precipitation.
pub fn tp_inverse(y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    let a = (y * std::f64::consts::LN_10 / 10.0).exp_m1();
    (a / TP_SCALE).powf(1.0 / TP_EXPONENT)
}

fn forward_value(t: ChannelTransform, x: f64) -> Result<f64, GridError> {
    match t {
        ChannelTransform::Identity => Ok(x),
        ChannelTransform::Precipitation => tp_transform(x),
    }
}

/// Population mean and standard deviation per channel over all times and grid points.
/// Precipitation channels are transformed first.
pub fn compute_norm_stats(
    states: &[StateField],
    registry: &VariableRegistry,
) -> Result<NormStats, GridError> {
    if states.len() < 2 {
        return Err(GridError::TooFewStates {
            needed: 2,
            got: states.len(),
        });
    }
    let n_ch = registry.n_channels();
    let names = registry.channel_names();
    let transform = channel_transforms(registry);
    let mut mean = vec![0.0; n_ch];
    let mut std = vec![0.0; n_ch];
    for c in 0..n_ch {
        let mut values = Vec::new();
        for s in states {
            if s.values.dim().0 != n_ch {
                return Err(GridError::ChannelCount {
                    stats: n_ch,
                    state: s.values.dim().0,
                });
            }
            for &v in s.values.index_axis(Axis(0), c) {
                values.push(forward_value(transform[c], v)?);
            }
        }
        let n = values.len() as f64;
        let m = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let sd = var.sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(GridError::ZeroVariance {
                channel: names[c].clone(),
            });
        }
        mean[c] = m;
        std[c] = sd;
    }
    Ok(NormStats {
        mean,
        std,
        transform,
    })
}

impl NormStats {
    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, state: &StateField) -> Result<(), GridError> {
        let c = state.values.dim().0;
        if c != self.mean.len() {
            return Err(GridError::ChannelCount {
                stats: self.mean.len(),
                state: c,
            });
        }
        Ok(())
    }

    pub fn normalize(&self, state: &StateField) -> Result<StateField, GridError> {
        if state.normalized {
            return Err(GridError::NormalizationFlag("normalized"));
        }
        self.check(state)?;
        let mut out = state.values.clone();
        for (c, mut ch) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s, t) = (self.mean[c], self.std[c], self.transform[c]);
            for v in ch.iter_mut() {
                *v = (forward_value(t, *v)? - m) / s;
            }
        }
        Ok(StateField::new(out, state.timestamp, true))
    }

    pub fn denormalize(&self, state: &StateField) -> Result<StateField, GridError> {
        if !state.normalized {
            return Err(GridError::NormalizationFlag("in physical units"));
        }
        self.check(state)?;
        let mut out = state.values.clone();
        for (c, mut ch) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s, t) = (self.mean[c], self.std[c], self.transform[c]);
            ch.mapv_inplace(|v| {
                let y = v * s + m;
                match t {
                    ChannelTransform::Identity => y,
                    ChannelTransform::Precipitation => tp_inverse(y),
                }
            });
        }
        Ok(StateField::new(out, state.timestamp, false))
    }

    /// Plain-text form; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# channel mean std transform\n");
        for c in 0..self.mean.len() {
            let t = match self.transform[c] {
                ChannelTransform::Identity => "identity",
                ChannelTransform::Precipitation => "precip",
            };
            s.push_str(&format!("{c} {:?} {:?} {t}\n", self.mean[c], self.std[c]));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, GridError> {
        let bad = |l: &str| GridError::InvalidRegistry(format!("bad stats line {l:?}"));
        let mut mean = Vec::new();
        let mut std = Vec::new();
        let mut transform = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(bad(line));
            }
            mean.push(parts[1].parse().map_err(|_| bad(line))?);
            let sd: f64 = parts[2].parse().map_err(|_| bad(line))?;
            if !(sd > 0.0) {
                return Err(GridError::ZeroVariance {
                    channel: parts[0].to_string(),
                });
            }
            std.push(sd);
            transform.push(match parts[3] {
                "identity" => ChannelTransform::Identity,
                "precip" => ChannelTransform::Precipitation,
                _ => return Err(bad(line)),
            });
        }
        Ok(Self {
            mean,
            std,
            transform,
        })
    }
}
