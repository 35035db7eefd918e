//! Toy atmosphere for tests and desk-scale experiments.
//!
//! Per pressure level a streamfunction and a temperature anomaly are advected
//! zonally at the level's jet speed, diffused, relaxed towards a fixed base
//! pattern and forced by land heating that follows local solar time. Each
//! latitude row is integrated in Fourier space with RK4. Output channels
//! (geopotential, humidity, winds, surface fields) are diagnosed from those
//! two prognostic fields. Assimilation-style jumps can be layered on top.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Duration, Timelike, Utc};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, DatasetView};
use crate::grid::{compute_norm_stats, GridError, GridSpec, StateField, VariableRegistry};

pub const EARTH_RADIUS_M: f64 = 6.371e6;
pub const GRAVITY: f64 = 9.80665;
const OMEGA: f64 = 7.292e-5;
const SCALE_HEIGHT_M: f64 = 7000.0;
/// RK4 is stable for |lambda dt| up to about 2.8 on both axes; keep a margin.
const RK4_LIMIT: f64 = 2.5;

pub const SURFACE_VARS: [&str; 5] = ["U10M", "V10M", "T2M", "MSLP", "TP"];
pub const PRESSURE_VARS: [&str; 5] = ["Z", "Q", "T", "U", "V"];
pub const STORED_STATICS: [&str; 3] = ["LSM", "ZSFC", "SOIL"];
pub const DEFAULT_STATICS: [&str; 7] = ["LSM", "ZSFC", "SOIL", "SIN_LAT", "COS_LAT", "SIN_LON", "COS_LON"];
pub const DEFAULT_CLOCK: [&str; 4] = ["SIN_TOD", "COS_TOD", "SIN_YEAR", "COS_YEAR"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("unstable time step {dt} h (fastest mode rate {rate:.4} per hour); use dt_hours <= {suggested:.4}")]
    Unstable { dt: f64, rate: f64, suggested: f64 },
    #[error("generated field is not finite at hour {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// A prescribed moving depression added on top of the evolved flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VortexConfig {
    pub lat: f64,
    pub lon: f64,
    /// Degrees per hour.
    pub dlat: f64,
    pub dlon: f64,
    /// Peak streamfunction anomaly at the lowest level, m^2 s^-1.
    pub amplitude: f64,
    pub radius_km: f64,
    /// The vortex vanishes from this hour on.
    pub lifetime_hours: Option<usize>,
}

impl VortexConfig {
    pub fn center(&self, hour: usize) -> (f64, f64) {
        let h = hour as f64;
        ((self.lat + self.dlat * h).clamp(-90.0, 90.0), (self.lon + self.dlon * h).rem_euclid(360.0))
    }

    pub fn alive(&self, hour: usize) -> bool {
        self.lifetime_hours.is_none_or(|l| hour < l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    pub include_poles: bool,
    /// hPa, top of the atmosphere first.
    pub levels: Vec<u32>,
    /// Number of hourly states written.
    pub hours: usize,
    /// Timestamp of the first written state.
    pub start: String,
    pub seed: u64,
    pub dt_hours: f64,
    /// Integration before the first written state.
    pub spinup_hours: usize,
    /// Multiplies the per-level jet speed used for zonal advection.
    pub advection_scale: f64,
    /// Zonal diffusion, per hour per squared wavenumber.
    pub diffusion: f64,
    /// Relaxation time towards the base pattern.
    pub damping_hours: f64,
    /// Multiplies the diurnal heating and the circulation it drives.
    pub forcing_amplitude: f64,
    /// Jump RMS per channel, as a multiple of the channel's spatial standard deviation.
    pub jump_eps: f64,
    /// Per-channel replacements for `jump_eps`, keyed by channel name.
    pub jump_eps_channels: BTreeMap<String, f64>,
    pub jump_hours: Vec<u32>,
    pub vortex: Option<VortexConfig>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_lat: 32,
            n_lon: 64,
            include_poles: false,
            levels: vec![200, 500, 850],
            hours: 96,
            start: "2021-01-01T00:00:00Z".into(),
            seed: 0,
            dt_hours: 0.5,
            spinup_hours: 48,
            advection_scale: 1.0,
            diffusion: 2e-5,
            damping_hours: 120.0,
            forcing_amplitude: 1.0,
            jump_eps: 0.0,
            jump_eps_channels: BTreeMap::new(),
            jump_hours: vec![9, 21],
            vortex: None,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SynthError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn start_time(&self) -> Result<DateTime<Utc>, SynthError> {
        DateTime::parse_from_rfc3339(&self.start)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| SynthError::Config(format!("bad start time {:?}: {e}", self.start)))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.hours < 24 {
            return bad(format!("hours must be at least 24, got {}", self.hours));
        }
        if self.n_lat < 3 || self.n_lon < 8 || self.n_lon % 2 != 0 {
            return bad("grid needs n_lat >= 3 and an even n_lon >= 8".into());
        }
        if self.levels.is_empty() || self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return bad("levels must be non-empty and increase downward".into());
        }
        if self.levels.iter().any(|&p| p == 0 || p > 1100) {
            return bad("levels must lie in (0, 1100] hPa".into());
        }
        if !(self.dt_hours > 0.0 && self.dt_hours <= 1.0 && (1.0 / self.dt_hours).fract().abs() < 1e-9) {
            return bad("dt_hours must divide one hour".into());
        }
        if !(self.diffusion >= 0.0 && self.damping_hours > 0.0 && self.advection_scale.is_finite()) {
            return bad("diffusion must be >= 0 and damping_hours > 0".into());
        }
        if !self.forcing_amplitude.is_finite() {
            return bad("forcing_amplitude must be finite".into());
        }
        if self.jump_eps < 0.0 || self.jump_eps_channels.values().any(|&e| !(e >= 0.0)) {
            return bad("jump_eps must be >= 0".into());
        }
        if self.jump_hours.iter().any(|&h| h > 23) {
            return bad("jump_hours must be UTC hours 0..=23".into());
        }
        let names = self.registry()?.channel_names();
        if let Some(k) = self.jump_eps_channels.keys().find(|k| !names.contains(k)) {
            return bad(format!("jump_eps_channels names unknown channel {k}"));
        }
        if let Some(v) = &self.vortex {
            if !(v.radius_km > 0.0 && v.lat.abs() <= 90.0) {
                return bad("vortex needs radius_km > 0 and |lat| <= 90".into());
            }
        }
        self.start_time()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec, SynthError> {
        Ok(GridSpec::regular(self.n_lat, self.n_lon, self.include_poles)?)
    }

    pub fn registry(&self) -> Result<VariableRegistry, SynthError> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Ok(VariableRegistry::new(
            s(&SURFACE_VARS),
            s(&PRESSURE_VARS),
            self.levels.clone(),
            s(&DEFAULT_STATICS),
            s(&DEFAULT_CLOCK),
        )?)
    }

    /// Fastest decay/oscillation rate of any Fourier mode, per hour.
    pub fn max_rate(&self) -> f64 {
        let m = (self.n_lon / 2) as f64;
        let omega = self
            .levels
            .iter()
            .map(|&p| jet_omega(p, self.advection_scale).abs())
            .fold(0.0, f64::max);
        let damp = self.diffusion * m * m + 1.0 / self.damping_hours;
        (omega * m).hypot(damp)
    }

    pub fn check_stability(&self) -> Result<(), SynthError> {
        let rate = self.max_rate();
        if rate * self.dt_hours > RK4_LIMIT {
            let mut suggested = RK4_LIMIT / rate;
            // Round down to a divisor of one hour.
            suggested = 1.0 / (1.0 / suggested).ceil();
            return Err(SynthError::Unstable {
                dt: self.dt_hours,
                rate,
                suggested,
            });
        }
        Ok(())
    }
}

/// Jet speed at `p` hPa, m/s: strongest aloft.
fn jet_speed(p: u32) -> f64 {
    5.0 + 20.0 * (1.0 - p as f64 / 1000.0).max(0.0) / 0.8
}

/// Zonal angular speed of the level, radians per hour.
fn jet_omega(p: u32, scale: f64) -> f64 {
    scale * jet_speed(p) / EARTH_RADIUS_M * 3600.0
}

/// Weight of the lowest-level anomaly felt at `p`.
fn level_profile(p: u32, p_ref: u32) -> f64 {
    (p as f64 / p_ref as f64).powf(1.5).min(1.0)
}

fn coriolis(lat_deg: f64) -> f64 {
    let f = 2.0 * OMEGA * lat_deg.to_radians().sin();
    let floor = 2.0 * OMEGA * 15f64.to_radians().sin();
    if f < 0.0 {
        f.min(-floor)
    } else {
        f.max(floor)
    }
}

fn great_circle_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M / 1000.0 * a.sqrt().min(1.0).asin()
}

/// Random smooth field from low zonal and meridional harmonics.
fn smooth_pattern(grid: &GridSpec, rng: &mut ChaCha8Rng, max_m: usize, max_n: usize) -> Array2<f64> {
    let mut terms = Vec::new();
    for m in 0..=max_m {
        for n in 0..=max_n {
            let a: f64 = rng.sample(StandardNormal);
            let ph: f64 = rng.random_range(0.0..2.0 * PI);
            let pn: f64 = rng.random_range(0.0..2.0 * PI);
            terms.push((m as f64, n as f64, a / (1.0 + (m + n) as f64), ph, pn));
        }
    }
    let lats = grid.latitudes();
    let lons = grid.longitudes();
    Array2::from_shape_fn((lats.len(), lons.len()), |(i, j)| {
        let (phi, lam) = (lats[i].to_radians(), lons[j].to_radians());
        terms
            .iter()
            .map(|&(m, n, a, ph, pn)| a * (m * lam + ph).cos() * (n * phi + pn).cos())
            .sum::<f64>()
    })
}

fn rms(a: &Array2<f64>) -> f64 {
    (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt()
}

/// Land fraction pattern with its derived stored statics.
struct Surface {
    land: Array2<f64>,
    lsm: Array2<f64>,
    zsfc: Array2<f64>,
    soil: Array2<f64>,
}

fn surface(grid: &GridSpec, seed: u64) -> Surface {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let raw = smooth_pattern(grid, &mut rng, 4, 3);
    let mut sorted: Vec<f64> = raw.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    // About 30% land.
    let thr = sorted[(sorted.len() * 7) / 10];
    let width = rms(&raw) * 0.15 + 1e-12;
    let land = raw.mapv(|v| 1.0 / (1.0 + (-(v - thr) / width).exp()));
    let lsm = raw.mapv(|v| if v > thr { 1.0 } else { 0.0 });
    let top = sorted.last().copied().unwrap_or(thr) - thr + 1e-12;
    let zsfc = raw.mapv(|v| GRAVITY * 3000.0 * ((v - thr) / top).max(0.0));
    let soil = ndarray::Zip::from(&raw)
        .and(&lsm)
        .map_collect(|&v, &l| l * (1.0 + ((v * 5.0).rem_euclid(3.0)).floor()));
    Surface { land, lsm, zsfc, soil }
}

/// Row-wise complex FFT with shared plans.
struct RowFft {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl RowFft {
    fn new(n: usize) -> Self {
        let mut p = FftPlanner::new();
        Self {
            n,
            fwd: p.plan_fft_forward(n),
            inv: p.plan_fft_inverse(n),
        }
    }

    fn forward(&self, a: &Array2<f64>) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        buf
    }

    fn inverse(&self, spec: &[Complex64], rows: usize) -> Array2<f64> {
        let mut buf = spec.to_vec();
        self.inv.process(&mut buf);
        let s = 1.0 / self.n as f64;
        Array2::from_shape_fn((rows, self.n), |(i, j)| buf[i * self.n + j].re * s)
    }

    /// Signed wavenumber of Fourier index `k`; the Nyquist mode maps to 0
    /// for odd-order operators so real fields stay real.
    fn wavenumber(&self, k: usize) -> (f64, f64) {
        let n = self.n;
        if 2 * k == n {
            (0.0, k as f64)
        } else if 2 * k < n {
            (k as f64, k as f64)
        } else {
            (k as f64 - n as f64, (n - k) as f64)
        }
    }
}

/// One prognostic field on one level: `dq/dt = -w dq/dlam + kappa d2q/dlam2
/// - (q - base)/tau + F_cos cos(wd t) - F_sin sin(wd t)`.
struct Prognostic {
    spec: Vec<Complex64>,
    base: Vec<Complex64>,
    f_cos: Vec<Complex64>,
    f_sin: Vec<Complex64>,
    /// Linear operator eigenvalue per Fourier index, excluding relaxation.
    lambda: Vec<Complex64>,
}

impl Prognostic {
    fn rhs(&self, q: &[Complex64], t_hours: f64, inv_tau: f64, out: &mut [Complex64]) {
        let wd = 2.0 * PI / 24.0;
        let (c, s) = ((wd * t_hours).cos(), (wd * t_hours).sin());
        for k in 0..q.len() {
            out[k] = self.lambda[k] * q[k] - (q[k] - self.base[k]) * inv_tau + self.f_cos[k] * c - self.f_sin[k] * s;
        }
    }

    fn rk4(&mut self, t: f64, dt: f64, inv_tau: f64) {
        let n = self.spec.len();
        let mut k1 = vec![Complex64::default(); n];
        let mut k2 = k1.clone();
        let mut k3 = k1.clone();
        let mut k4 = k1.clone();
        let mut tmp = k1.clone();
        self.rhs(&self.spec, t, inv_tau, &mut k1);
        for i in 0..n {
            tmp[i] = self.spec[i] + k1[i] * (dt / 2.0);
        }
        self.rhs(&tmp, t + dt / 2.0, inv_tau, &mut k2);
        for i in 0..n {
            tmp[i] = self.spec[i] + k2[i] * (dt / 2.0);
        }
        self.rhs(&tmp, t + dt / 2.0, inv_tau, &mut k3);
        for i in 0..n {
            tmp[i] = self.spec[i] + k3[i] * dt;
        }
        self.rhs(&tmp, t + dt, inv_tau, &mut k4);
        for i in 0..n {
            self.spec[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0);
        }
    }
}

struct Model {
    grid: GridSpec,
    fft: RowFft,
    psi: Vec<Prognostic>,
    temp: Vec<Prognostic>,
    inv_tau: f64,
}

impl Model {
    fn new(cfg: &SynthConfig, grid: &GridSpec, land: &Array2<f64>, t0_utc_hours: f64) -> Self {
        let (h, w) = (grid.n_lat(), grid.n_lon());
        let fft = RowFft::new(w);
        let lats = grid.latitudes().to_vec();
        let lons = grid.longitudes().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let p_low = *cfg.levels.last().unwrap();
        // Heating peaks at 14 local solar time; split into cos/sin of UTC.
        let local_phase = |j: usize| 2.0 * PI * (lons[j] / 360.0 + (t0_utc_hours - 14.0) / 24.0);
        let heat_cos = Array2::from_shape_fn((h, w), |(i, j)| land[[i, j]] * lats[i].to_radians().cos() * local_phase(j).cos());
        let heat_sin = Array2::from_shape_fn((h, w), |(i, j)| land[[i, j]] * lats[i].to_radians().cos() * local_phase(j).sin());
        let mut psi = Vec::new();
        let mut temp = Vec::new();
        for &p in &cfg.levels {
            let omega = jet_omega(p, cfg.advection_scale);
            let lambda: Vec<Complex64> = (0..h * w)
                .map(|idx| {
                    let (m_odd, m_even) = fft.wavenumber(idx % w);
                    Complex64::new(-cfg.diffusion * m_even * m_even, -omega * m_odd)
                })
                .collect();
            let u0 = jet_speed(p);
            let amp = 6e6 * (0.5 + 0.5 * (1.0 - p as f64 / 1000.0) / 0.8);
            let eddies = smooth_pattern(grid, &mut rng, 5, 3);
            let eddies = &eddies * (amp / rms(&eddies).max(1e-12));
            let base_psi = Array2::from_shape_fn((h, w), |(i, j)| {
                let phi = lats[i].to_radians();
                -u0 * EARTH_RADIUS_M * phi.sin() + eddies[[i, j]] * phi.cos()
            });
            let t_eddies = smooth_pattern(grid, &mut rng, 5, 3);
            let base_t = &t_eddies * (3.0 / rms(&t_eddies).max(1e-12));
            let lvl = level_profile(p, p_low);
            let a_t = 0.6 * cfg.forcing_amplitude * lvl;
            let a_psi = 3e5 * cfg.forcing_amplitude * lvl;
            let make = |base: &Array2<f64>, a: f64| Prognostic {
                spec: fft.forward(base),
                base: fft.forward(base),
                f_cos: fft.forward(&(&heat_cos * a)),
                f_sin: fft.forward(&(&heat_sin * a)),
                lambda: lambda.clone(),
            };
            psi.push(make(&base_psi, a_psi));
            temp.push(make(&base_t, a_t));
        }
        Self {
            grid: grid.clone(),
            fft,
            psi,
            temp,
            inv_tau: 1.0 / cfg.damping_hours,
        }
    }

    fn step(&mut self, t: f64, dt: f64) {
        for f in self.psi.iter_mut().chain(self.temp.iter_mut()) {
            f.rk4(t, dt, self.inv_tau);
        }
    }

    fn grid_fields(&self) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let h = self.grid.n_lat();
        (
            self.psi.iter().map(|f| self.fft.inverse(&f.spec, h)).collect(),
            self.temp.iter().map(|f| self.fft.inverse(&f.spec, h)).collect(),
        )
    }
}

/// Winds from a streamfunction: `u = -dpsi/(R dphi)`, `v = dpsi/(R cos(phi) dlam)`.
fn winds(psi: &Array2<f64>, grid: &GridSpec, fft: &RowFft) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = psi.dim();
    let lats: Vec<f64> = grid.latitudes().iter().map(|l| l.to_radians()).collect();
    let u = Array2::from_shape_fn((h, w), |(i, j)| {
        let (a, b) = match i {
            0 => (0, 1),
            _ if i == h - 1 => (h - 2, h - 1),
            _ => (i - 1, i + 1),
        };
        -(psi[[b, j]] - psi[[a, j]]) / (EARTH_RADIUS_M * (lats[b] - lats[a]))
    });
    let mut spec = fft.forward(psi);
    for (idx, c) in spec.iter_mut().enumerate() {
        let (m, _) = fft.wavenumber(idx % w);
        *c *= Complex64::new(0.0, m);
    }
    let dl = fft.inverse(&spec, h);
    let v = Array2::from_shape_fn((h, w), |(i, j)| dl[[i, j]] / (EARTH_RADIUS_M * lats[i].cos().max(1e-3)));
    (u, v)
}

fn saturation_q(t_kelvin: f64, p_hpa: f64) -> f64 {
    let tc = t_kelvin - 273.15;
    let es = 6.112 * (17.67 * tc / (tc + 243.5)).exp();
    0.622 * es / (p_hpa - 0.378 * es).max(1.0)
}

/// Diagnoses every output channel from the prognostic fields of one hour.
fn diagnose(
    cfg: &SynthConfig,
    grid: &GridSpec,
    registry: &VariableRegistry,
    fft: &RowFft,
    mut psi: Vec<Array2<f64>>,
    temp: &[Array2<f64>],
    hour: usize,
) -> Array3<f64> {
    let (h, w) = (grid.n_lat(), grid.n_lon());
    let lats = grid.latitudes();
    let lons = grid.longitudes();
    let p_low = *cfg.levels.last().unwrap();
    if let Some(v) = cfg.vortex.as_ref().filter(|v| v.alive(hour)) {
        let (clat, clon) = v.center(hour);
        let sign = if clat < 0.0 { 1.0 } else { -1.0 };
        for (l, &p) in cfg.levels.iter().enumerate() {
            let a = sign * v.amplitude * level_profile(p, p_low);
            for i in 0..h {
                for j in 0..w {
                    let d = great_circle_km(lats[i], lons[j], clat, clon) / v.radius_km;
                    psi[l][[i, j]] += a * (-0.5 * d * d).exp();
                }
            }
        }
    }
    let mut out = Array3::zeros((registry.n_channels(), h, w));
    let mut low = None;
    for (l, &p) in cfg.levels.iter().enumerate() {
        let (u, v) = winds(&psi[l], grid, fft);
        let pf = p as f64;
        let mut t_abs = Array2::zeros((h, w));
        for i in 0..h {
            let s2 = lats[i].to_radians().sin().powi(2);
            let f = coriolis(lats[i]);
            for j in 0..w {
                let t = 300.0 - 30.0 * s2 - 80.0 * (1.0 - pf / 1000.0) + temp[l][[i, j]];
                t_abs[[i, j]] = t;
                let rh = 0.55 + 0.35 * (temp[l][[i, j]] / 3.0).tanh();
                let vals = [
                    GRAVITY * SCALE_HEIGHT_M * (1000.0 / pf).ln() + f * psi[l][[i, j]],
                    rh * saturation_q(t, pf),
                    t,
                    u[[i, j]],
                    v[[i, j]],
                ];
                for (name, val) in PRESSURE_VARS.iter().zip(vals) {
                    let c = registry.pressure_index(name, p).unwrap();
                    out[[c, i, j]] = val;
                }
            }
        }
        if p == p_low {
            low = Some((u, v, t_abs, l));
        }
    }
    let (u, v, t_abs, l) = low.unwrap();
    let u0 = jet_speed(p_low);
    for i in 0..h {
        let f = coriolis(lats[i]);
        // Pressure follows the eddies only; the jet's balancing gradient is left out.
        let jet = -u0 * EARTH_RADIUS_M * lats[i].to_radians().sin();
        for j in 0..w {
            let rh = 0.55 + 0.35 * (temp[l][[i, j]] / 3.0).tanh();
            let vals = [
                0.7 * u[[i, j]],
                0.7 * v[[i, j]],
                t_abs[[i, j]] + 8.0,
                101_325.0 + 1.2 * f * (psi[l][[i, j]] - jet),
                3e-4 * ((rh - 0.7) / 0.2).max(0.0),
            ];
            for (c, val) in vals.into_iter().enumerate() {
                out[[c, i, j]] = val;
            }
        }
    }
    out
}

/// Runs the generator; jumps are applied if `jump_eps` or any per-channel
/// override is positive.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    cfg.check_stability()?;
    let grid = cfg.grid()?;
    let registry = cfg.registry()?;
    let start = cfg.start_time()?;
    let sfc = surface(&grid, cfg.seed);
    let t0 = start - Duration::hours(cfg.spinup_hours as i64);
    let t0_utc = t0.num_seconds_from_midnight() as f64 / 3600.0;
    let mut model = Model::new(cfg, &grid, &sfc.land, t0_utc);
    let sub = (1.0 / cfg.dt_hours).round() as usize;
    let mut ds = Dataset::new(grid.clone(), registry.clone());
    let mut t = 0.0;
    for hour in 0..cfg.spinup_hours + cfg.hours {
        if hour >= cfg.spinup_hours {
            let k = hour - cfg.spinup_hours;
            let (psi, temp) = model.grid_fields();
            let values = diagnose(cfg, &grid, &registry, &model.fft, psi, &temp, k);
            if values.iter().any(|v| !v.is_finite()) {
                return Err(SynthError::NonFinite(k));
            }
            ds.states
                .push(StateField::new(values, start + Duration::hours(k as i64), false));
        }
        for s in 0..sub {
            model.step(t + s as f64 * cfg.dt_hours, cfg.dt_hours);
        }
        t = (hour + 1) as f64;
    }
    ds.static_names = STORED_STATICS.iter().map(|s| s.to_string()).collect();
    let mut st = Array3::zeros((3, grid.n_lat(), grid.n_lon()));
    for (k, f) in [&sfc.lsm, &sfc.zsfc, &sfc.soil].into_iter().enumerate() {
        st.index_axis_mut(ndarray::Axis(0), k).assign(f);
    }
    ds.statics = Some(st);
    let amps = jump_amplitudes(cfg, &ds);
    if amps.iter().any(|&a| a > 0.0) {
        inject_assimilation_jumps(&mut ds, &amps, &cfg.jump_hours, cfg.seed);
    }
    for state in &mut ds.states {
        // Jumps can push humidity and precipitation below zero.
        for name in ["Q", "TP"] {
            for c in (0..registry.n_channels()).filter(|&c| channel_var(&registry, c) == name) {
                state.values.index_axis_mut(ndarray::Axis(0), c).mapv_inplace(|v| v.max(0.0));
            }
        }
    }
    // Round through f32 so the in-memory dataset equals what is written.
    for state in &mut ds.states {
        state.values.mapv_inplace(|v| v as f32 as f64);
    }
    if let Some(st) = ds.statics.as_mut() {
        st.mapv_inplace(|v| v as f32 as f64);
    }
    ds.norm_stats = Some(compute_norm_stats(&ds.states, &registry)?);
    ds.norm_provenance = "all generated states".into();
    if let serde_json::Value::Object(m) = serde_json::to_value(cfg).expect("config serializes") {
        for (k, v) in m {
            ds.config.insert(format!("synth.{k}"), v.to_string());
        }
    }
    ds.validate()?;
    Ok(ds)
}

fn channel_var(registry: &VariableRegistry, c: usize) -> String {
    registry.channels()[c].variable.clone()
}

/// Generates a trajectory and writes it to `dir`.
pub fn generate_trajectory(cfg: &SynthConfig, dir: &Path) -> Result<Dataset, SynthError> {
    let ds = generate(cfg)?;
    ds.write(dir)?;
    Ok(ds)
}

/// Root-mean spatial standard deviation of each channel over all states.
pub fn channel_scales(ds: &Dataset) -> Vec<f64> {
    let c = ds.registry.n_channels();
    let mut acc = vec![0.0; c];
    for s in &ds.states {
        for (k, a) in acc.iter_mut().enumerate() {
            let plane = s.values.index_axis(ndarray::Axis(0), k);
            let m = plane.mean().unwrap_or(0.0);
            *a += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane.len() as f64;
        }
    }
    acc.iter().map(|a| (a / ds.states.len().max(1) as f64).sqrt()).collect()
}

/// Physical jump RMS per channel: `eps * channel scale`, zero for
/// precipitation unless overridden.
pub fn jump_amplitudes(cfg: &SynthConfig, ds: &Dataset) -> Vec<f64> {
    let names = ds.registry.channel_names();
    let scales = channel_scales(ds);
    names
        .iter()
        .zip(scales)
        .map(|(n, s)| {
            let eps = match cfg.jump_eps_channels.get(n) {
                Some(&e) => e,
                None if n == "TP" => 0.0,
                None => cfg.jump_eps,
            };
            eps * s
        })
        .collect()
}

/// Adds a seeded, smooth offset with RMS `amplitudes[c]` to channel `c` of
/// every state from each jump hour until the next one. States before the
/// first jump hour are left alone.
pub fn inject_assimilation_jumps(ds: &mut Dataset, amplitudes: &[f64], jump_hours: &[u32], seed: u64) {
    if amplitudes.iter().all(|&a| a == 0.0) {
        return;
    }
    let grid = ds.grid.clone();
    let mut segment: Option<Array3<f64>> = None;
    let mut event = 0u64;
    for state in &mut ds.states {
        let t = state.timestamp;
        if t.minute() == 0 && t.second() == 0 && jump_hours.contains(&t.hour()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a75_6d70);
            rng.set_stream(event + 1);
            event += 1;
            let mut off = Array3::zeros(state.values.dim());
            for (c, &a) in amplitudes.iter().enumerate() {
                let pat = smooth_pattern(&grid, &mut rng, 3, 3);
                if a > 0.0 {
                    let s = a / rms(&pat).max(1e-300);
                    off.index_axis_mut(ndarray::Axis(0), c).assign(&(&pat * s));
                }
            }
            segment = Some(off);
        }
        if let Some(off) = &segment {
            state.values += off;
        }
    }
}

/// States at 00, 06, 12 and 18 UTC.
pub fn split_6h_view(ds: &Dataset) -> DatasetView<'_> {
    ds.hours_view(&[0, 6, 12, 18])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{discontinuity_score, domain_mean_kinetic_energy, zonal_power_spectrum};

    fn small(hours: usize) -> SynthConfig {
        SynthConfig {
            n_lat: 16,
            n_lon: 32,
            hours,
            spinup_hours: 24,
            ..Default::default()
        }
    }

    fn ke_series(ds: &Dataset) -> Vec<f64> {
        ds.states
            .iter()
            .map(|s| domain_mean_kinetic_energy(s, &ds.grid, &ds.registry).unwrap())
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { hours: 23, ..small(48) }.validate().is_err());
        assert!(SynthConfig { jump_eps: -1.0, ..small(48) }.validate().is_err());
        assert!(SynthConfig { levels: vec![850, 500], ..small(48) }.validate().is_err());
        assert!(SynthConfig::from_toml("hours = 48\nbogus = 1").is_err());
        let cfg = SynthConfig::from_toml("hours = 48\nseed = 7\njump_eps = 0.5\n").unwrap();
        assert_eq!(SynthConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn large_step_reports_stable_alternative() {
        let cfg = SynthConfig {
            diffusion: 0.02,
            dt_hours: 1.0,
            ..small(48)
        };
        match generate(&cfg) {
            Err(SynthError::Unstable { suggested, .. }) => {
                assert!(suggested < 1.0);
                let ok = SynthConfig { dt_hours: suggested, ..cfg };
                assert!(ok.check_stability().is_ok());
            }
            other => panic!("expected instability, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate(&small(30)).unwrap();
        let b = generate(&small(30)).unwrap();
        assert_eq!(a.states, b.states);
        let c = generate(&SynthConfig { seed: 1, ..small(30) }).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn fields_are_plausible() {
        let ds = generate(&small(48)).unwrap();
        assert_eq!(ds.len(), 48);
        assert_eq!(ds.registry.n_channels(), 20);
        let reg = &ds.registry;
        for s in &ds.states {
            let ch = |n: &str| s.values.index_axis(ndarray::Axis(0), reg.channel_index(n).unwrap());
            assert!(ch("MSLP").iter().all(|&p| (95_000.0..108_000.0).contains(&p)));
            assert!(ch("T850").iter().all(|&t| (230.0..320.0).contains(&t)));
            assert!(ch("U200").iter().all(|&u| u.abs() < 120.0));
            assert!(ch("Q850").iter().all(|&q| (0.0..0.05).contains(&q)));
            assert!(ch("TP").iter().all(|&p| p >= 0.0));
            let z = |n| ch(n).mean().unwrap();
            assert!(z("Z200") > z("Z500") && z("Z500") > z("Z850"));
        }
    }

    #[test]
    fn jump_free_energy_is_smooth() {
        let ds = generate(&small(96)).unwrap();
        let ke = ke_series(&ds);
        let mut inc: Vec<f64> = ke.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let max = inc.iter().copied().fold(0.0, f64::max);
        inc.sort_by(f64::total_cmp);
        let median = inc[inc.len() / 2];
        assert!(max < 5.0 * median, "max {max} median {median}");
    }

    #[test]
    fn more_diffusion_damps_small_scales() {
        let high_energy = |kappa: f64| {
            let ds = generate(&SynthConfig {
                diffusion: kappa,
                ..small(48)
            })
            .unwrap();
            let c = ds.registry.channel_index("T500").unwrap();
            let last = ds.states.last().unwrap();
            let s = zonal_power_spectrum(last.values.index_axis(ndarray::Axis(0), c), &ds.grid, (-60.0, 60.0)).unwrap();
            s.energy[8..].iter().sum::<f64>()
        };
        let (a, b, c) = (high_energy(1e-4), high_energy(2e-4), high_energy(4e-4));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn zero_jump_eps_leaves_data_untouched() {
        let mut ds = generate(&small(30)).unwrap();
        let before = ds.states.clone();
        inject_assimilation_jumps(&mut ds, &vec![0.0; 20], &[9, 21], 3);
        assert_eq!(ds.states, before);
    }

    #[test]
    fn jumps_persist_until_the_next_boundary() {
        let clean = generate(&small(48)).unwrap();
        let mut ds = clean.clone();
        let amps = vec![1.0; 20];
        inject_assimilation_jumps(&mut ds, &amps, &[9, 21], 5);
        let off = |k: usize| &ds.states[k].values - &clean.states[k].values;
        for k in 0..9 {
            assert!(off(k).iter().all(|&v| v == 0.0));
        }
        // Offsets are constant within a segment and change at 21 UTC.
        let close = |a: Array3<f64>, b: Array3<f64>| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6 * (1.0 + x.abs()));
        assert!(close(off(9), off(20)));
        assert!(!close(off(20), off(21)));
        assert!(close(off(21), off(32)));
        let plane = off(9).index_axis(ndarray::Axis(0), 3).to_owned();
        assert!((rms(&plane) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn detector_flags_exactly_the_injected_hours() {
        let cfg = SynthConfig {
            jump_eps: 0.3,
            ..small(96)
        };
        let ds = generate(&cfg).unwrap();
        let report = discontinuity_score(&ds.timestamps(), &ke_series(&ds), &[6, 9, 21], 3.0).unwrap();
        for s in &report.scores {
            assert_eq!(s.flag, s.hour != 6, "hour {} z {}", s.hour, s.z);
        }
    }

    #[test]
    fn six_hour_view_skips_the_boundary_jumps() {
        let ds = generate(&small(48)).unwrap();
        let view = split_6h_view(&ds);
        assert_eq!(view.len(), 8);
        assert!(view.iter().all(|s| s.timestamp.hour() % 6 == 0));

        let jumpy = generate(&SynthConfig {
            jump_eps: 0.3,
            ..small(96)
        })
        .unwrap();
        let ke = ke_series(&jumpy);
        let boundary: Vec<f64> = (1..ke.len())
            .filter(|&k| [9, 21].contains(&jumpy.states[k].timestamp.hour()))
            .map(|k| (ke[k] - ke[k - 1]).abs())
            .collect();
        let v = split_6h_view(&jumpy);
        let six: Vec<f64> = v.indices.windows(2).map(|w| (ke[w[1]] - ke[w[0]]).abs()).collect();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        assert!(mean(&six) < mean(&boundary), "{} vs {}", mean(&six), mean(&boundary));
    }

    #[test]
    fn vortex_marks_a_pressure_minimum() {
        let cfg = SynthConfig {
            n_lat: 46,
            n_lon: 90,
            vortex: Some(VortexConfig {
                lat: 20.0,
                lon: 130.0,
                dlat: 0.2,
                dlon: -0.3,
                amplitude: 1.5e7,
                radius_km: 400.0,
                lifetime_hours: Some(30),
            }),
            ..small(36)
        };
        let ds = generate(&cfg).unwrap();
        let c = ds.registry.channel_index("MSLP").unwrap();
        let v = cfg.vortex.as_ref().unwrap();
        for k in [0, 12, 24] {
            let (clat, clon) = v.center(k);
            let f = ds.states[k].values.index_axis(ndarray::Axis(0), c);
            let mut best = (f64::INFINITY, 0.0, 0.0);
            for (i, &la) in ds.grid.latitudes().iter().enumerate() {
                for (j, &lo) in ds.grid.longitudes().iter().enumerate() {
                    if great_circle_km(la, lo, clat, clon) < 800.0 && f[[i, j]] < best.0 {
                        best = (f[[i, j]], la, lo);
                    }
                }
            }
            let d = great_circle_km(best.1, best.2, clat, clon);
            assert!(d < 450.0, "hour {k}: minimum {d} km from the centre");
        }
    }
}
