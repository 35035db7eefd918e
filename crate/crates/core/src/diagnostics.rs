//! Forecast diagnostics: weighted RMSE, zonal spectra, column energy and
//! temporal discontinuity scores, with CSV writers for each.

use std::path::Path;

use chrono::{DateTime, Duration, Timelike, Utc};
use ndarray::{Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSpec, StateField, VariableRegistry};

pub const GRAVITY: f64 = 9.80665;
pub const CV_AIR: f64 = 718.0;
pub const LV0: f64 = 2.501e6;
pub const LV_SLOPE: f64 = 2361.0;
pub const DEFAULT_BOUNDARY_HOURS: [u32; 2] = [9, 21];
pub const DEFAULT_Z_THRESHOLD: f64 = 3.0;
pub const MIN_SERIES_LEN: usize = 48;

/// Normalization of `zonal_power_spectrum`, for run metadata.
pub const SPECTRUM_NORMALIZATION: &str =
    "E(0)=|F0|^2, E(m)=2|Fm|^2 for 0<m<N/2, E(N/2)=|F_N/2|^2 with Fm=DFT/N; sum over m equals the longitude mean of f^2";

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("missing channel {0}")]
    MissingChannel(String),
    #[error("no latitudes in band {0:?}")]
    EmptyBand((f64, f64)),
    #[error("series too short: need {need} hourly points, found {found}")]
    TooShort { need: usize, found: usize },
    #[error("series is not hourly at index {0}")]
    NotHourly(usize),
    #[error("energy needs at least two pressure levels")]
    TooFewLevels,
    #[error("csv output {0}")]
    Csv(String),
}

/// `sqrt(mean_ij w_lat(i) (f - t)^2)` over one channel.
pub fn weighted_rmse(
    forecast: &StateField,
    truth: &StateField,
    grid: &GridSpec,
    channel: usize,
) -> Result<f64, DiagError> {
    let dim = forecast.values.dim();
    if dim != truth.values.dim() || dim.1 != grid.n_lat() || dim.2 != grid.n_lon() {
        return Err(DiagError::GridMismatch(format!("{dim:?} vs {:?}", truth.values.dim())));
    }
    if channel >= dim.0 {
        return Err(DiagError::MissingChannel(format!("index {channel}")));
    }
    let w = grid.latitude_weights();
    let f = forecast.values.index_axis(Axis(0), channel);
    let t = truth.values.index_axis(Axis(0), channel);
    let mut s = 0.0;
    for ((i, j), a) in f.indexed_iter() {
        let b = t[[i, j]];
        s += w[i] * (a - b) * (a - b);
    }
    Ok((s / f.len() as f64).sqrt())
}

/// Weighted RMSE of every channel.
pub fn weighted_rmse_all(forecast: &StateField, truth: &StateField, grid: &GridSpec) -> Result<Vec<f64>, DiagError> {
    (0..forecast.values.dim().0)
        .map(|c| weighted_rmse(forecast, truth, grid, c))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub wavenumbers: Vec<usize>,
    pub energy: Vec<f64>,
    pub lat_band: (f64, f64),
}

/// Zonal power per wavenumber `0..=W/2`, area-weighted over the rows whose
/// latitude lies in `lat_band` (inclusive).
pub fn zonal_power_spectrum(
    field: ArrayView2<f64>,
    grid: &GridSpec,
    lat_band: (f64, f64),
) -> Result<SpectrumResult, DiagError> {
    let (h, n) = field.dim();
    if h != grid.n_lat() || n != grid.n_lon() {
        return Err(DiagError::GridMismatch(format!("field {h}x{n}")));
    }
    let (lo, hi) = (lat_band.0.min(lat_band.1), lat_band.0.max(lat_band.1));
    let w = grid.latitude_weights();
    let rows: Vec<usize> = (0..h)
        .filter(|&i| (lo..=hi).contains(&grid.latitudes()[i]))
        .collect();
    if rows.is_empty() {
        return Err(DiagError::EmptyBand(lat_band));
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    let half = n / 2;
    let mut energy = vec![0.0; half + 1];
    let wsum: f64 = rows.iter().map(|&i| w[i]).sum();
    let mut buf = vec![Complex64::default(); n];
    for &i in &rows {
        for (b, &v) in buf.iter_mut().zip(field.row(i)) {
            *b = Complex64::new(v, 0.0);
        }
        fft.process(&mut buf);
        let nn = (n * n) as f64;
        for (m, e) in energy.iter_mut().enumerate() {
            let p = buf[m].norm_sqr() / nn;
            let fold = if m == 0 || (n % 2 == 0 && m == half) { 1.0 } else { 2.0 };
            *e += w[i] / wsum * fold * p;
        }
    }
    Ok(SpectrumResult {
        wavenumbers: (0..=half).collect(),
        energy,
        lat_band,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBudget {
    pub timestamp: DateTime<Utc>,
    pub internal: f64,
    pub latent: f64,
    pub potential: f64,
    pub kinetic: f64,
}

/// Latent heat of vaporization at `tc` degrees Celsius, J/kg.
pub fn latent_heat(tc: f64) -> f64 {
    LV0 - LV_SLOPE * tc
}

/// Constants used by the energy diagnostics, for run metadata.
pub fn energy_constants() -> serde_json::Value {
    serde_json::json!({
        "g": GRAVITY,
        "c_v": CV_AIR,
        "L_v": format!("{LV0} - {LV_SLOPE} * T_c"),
        "integration": "trapezoid over the available pressure levels",
    })
}

/// Column integrals of the four energy terms, each `H x W`, J/m^2.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyColumns {
    pub internal: Array2<f64>,
    pub latent: Array2<f64>,
    pub potential: Array2<f64>,
    pub kinetic: Array2<f64>,
}

fn level_order(registry: &VariableRegistry) -> Result<Vec<u32>, DiagError> {
    if registry.levels.len() < 2 {
        return Err(DiagError::TooFewLevels);
    }
    let mut levels = registry.levels.clone();
    levels.sort_unstable();
    Ok(levels)
}

fn plane<'a>(
    state: &'a StateField,
    registry: &VariableRegistry,
    var: &str,
    p: u32,
) -> Result<ArrayView2<'a, f64>, DiagError> {
    let c = registry
        .pressure_index(var, p)
        .ok_or_else(|| DiagError::MissingChannel(format!("{var}{p}")))?;
    Ok(state.values.index_axis(Axis(0), c))
}

/// Trapezoid integral in pressure (Pa) of `f(level)`, divided by g.
fn integrate(
    levels: &[u32],
    shape: (usize, usize),
    mut f: impl FnMut(u32) -> Result<Array2<f64>, DiagError>,
) -> Result<Array2<f64>, DiagError> {
    let mut acc = Array2::zeros(shape);
    let mut prev = f(levels[0])?;
    for w in levels.windows(2) {
        let next = f(w[1])?;
        let dp = (w[1] - w[0]) as f64 * 100.0;
        acc.scaled_add(0.5 * dp / GRAVITY, &(&prev + &next));
        prev = next;
    }
    Ok(acc)
}

/// Column energy terms of a state in physical units.
pub fn energy_columns(state: &StateField, grid: &GridSpec, registry: &VariableRegistry) -> Result<EnergyColumns, DiagError> {
    state
        .check(grid, registry)
        .map_err(|e| DiagError::GridMismatch(e.to_string()))?;
    let levels = level_order(registry)?;
    let shape = (grid.n_lat(), grid.n_lon());
    let internal = integrate(&levels, shape, |p| {
        let t = plane(state, registry, "T", p)?;
        let q = plane(state, registry, "Q", p)?;
        Ok(ndarray::Zip::from(&t).and(&q).map_collect(|&t, &q| (1.0 - q) * CV_AIR * (t - 273.15)))
    })?;
    let latent = integrate(&levels, shape, |p| {
        let t = plane(state, registry, "T", p)?;
        let q = plane(state, registry, "Q", p)?;
        Ok(ndarray::Zip::from(&t).and(&q).map_collect(|&t, &q| latent_heat(t - 273.15) * q))
    })?;
    let potential = integrate(&levels, shape, |p| Ok(plane(state, registry, "Z", p)?.to_owned()))?;
    let kinetic = kinetic_column(state, registry, &levels, shape)?;
    Ok(EnergyColumns {
        internal,
        latent,
        potential,
        kinetic,
    })
}

fn kinetic_column(
    state: &StateField,
    registry: &VariableRegistry,
    levels: &[u32],
    shape: (usize, usize),
) -> Result<Array2<f64>, DiagError> {
    integrate(levels, shape, |p| {
        let u = plane(state, registry, "U", p)?;
        let v = plane(state, registry, "V", p)?;
        Ok(ndarray::Zip::from(&u).and(&v).map_collect(|&u, &v| 0.5 * (u * u + v * v)))
    })
}

fn area_mean(f: &Array2<f64>, grid: &GridSpec) -> f64 {
    let w = grid.latitude_weights();
    f.indexed_iter().map(|((i, _), v)| w[i] * v).sum::<f64>() / f.len() as f64
}

/// Area-weighted domain means of the column energy terms.
pub fn energy_components(state: &StateField, grid: &GridSpec, registry: &VariableRegistry) -> Result<EnergyBudget, DiagError> {
    let c = energy_columns(state, grid, registry)?;
    Ok(EnergyBudget {
        timestamp: state.timestamp,
        internal: area_mean(&c.internal, grid),
        latent: area_mean(&c.latent, grid),
        potential: area_mean(&c.potential, grid),
        kinetic: area_mean(&c.kinetic, grid),
    })
}

/// Area-weighted mean column kinetic energy; needs only U and V.
pub fn domain_mean_kinetic_energy(state: &StateField, grid: &GridSpec, registry: &VariableRegistry) -> Result<f64, DiagError> {
    state
        .check(grid, registry)
        .map_err(|e| DiagError::GridMismatch(e.to_string()))?;
    let levels = level_order(registry)?;
    let k = kinetic_column(state, registry, &levels, (grid.n_lat(), grid.n_lon()))?;
    Ok(area_mean(&k, grid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpScore {
    /// End of the scored increment.
    pub time: DateTime<Utc>,
    pub hour: u32,
    pub increment: f64,
    pub z: f64,
    pub flag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpReport {
    pub scores: Vec<JumpScore>,
    /// Median |increment| over non-boundary hours.
    pub median: f64,
    pub threshold: f64,
}

impl JumpReport {
    pub fn flagged(&self) -> Vec<DateTime<Utc>> {
        self.scores.iter().filter(|s| s.flag).map(|s| s.time).collect()
    }

    pub fn any_flag(&self) -> bool {
        self.scores.iter().any(|s| s.flag)
    }

    pub fn max_z(&self) -> f64 {
        self.scores.iter().map(|s| s.z).fold(0.0, f64::max)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scores each increment ending at a boundary hour against the median
/// increment at all other hours: `z = |inc| / median`, flagged when `z > threshold`.
pub fn discontinuity_score(
    times: &[DateTime<Utc>],
    values: &[f64],
    boundary_hours: &[u32],
    threshold: f64,
) -> Result<JumpReport, DiagError> {
    if times.len() != values.len() || values.len() < MIN_SERIES_LEN {
        return Err(DiagError::TooShort {
            need: MIN_SERIES_LEN,
            found: values.len().min(times.len()),
        });
    }
    if let Some(k) = (1..times.len()).find(|&k| times[k] - times[k - 1] != Duration::hours(1)) {
        return Err(DiagError::NotHourly(k));
    }
    let is_boundary = |k: usize| boundary_hours.contains(&times[k].hour());
    let inc = |k: usize| (values[k] - values[k - 1]).abs();
    let med = median((1..values.len()).filter(|&k| !is_boundary(k)).map(inc).collect());
    let scores = (1..values.len())
        .filter(|&k| is_boundary(k))
        .map(|k| {
            let a = inc(k);
            let z = if a == 0.0 {
                0.0
            } else if med == 0.0 {
                f64::INFINITY
            } else {
                a / med
            };
            JumpScore {
                time: times[k],
                hour: times[k].hour(),
                increment: values[k] - values[k - 1],
                z,
                flag: z > threshold,
            }
        })
        .collect();
    Ok(JumpReport {
        scores,
        median: med,
        threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub lead_hour: usize,
    pub channel: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub wavenumber: usize,
    pub energy: f64,
    pub lead_day: f64,
    pub channel: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpRow {
    pub time: DateTime<Utc>,
    pub hour: u32,
    pub z: f64,
    pub flag: bool,
}

impl From<&JumpScore> for JumpRow {
    fn from(s: &JumpScore) -> Self {
        Self {
            time: s.time,
            hour: s.hour,
            z: s.z,
            flag: s.flag,
        }
    }
}

/// Writes serializable rows as a CSV file with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DiagError> {
    let err = |e: csv::Error| DiagError::Csv(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| DiagError::Csv(format!("{}: {e}", path.display())))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DiagError> {
    let err = |e: csv::Error| DiagError::Csv(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().map(|x| x.map_err(err)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 6, 1, 0, 0, 0).unwrap()
    }

    fn hourly(n: usize) -> Vec<DateTime<Utc>> {
        (0..n).map(|h| t0() + Duration::hours(h as i64)).collect()
    }

    fn registry() -> VariableRegistry {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        VariableRegistry::new(s(&["MSLP"]), s(&["Z", "Q", "T", "U", "V"]), vec![200, 500, 850], vec![], vec![]).unwrap()
    }

    fn random_state(c: usize, h: usize, w: usize, seed: u64) -> StateField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StateField::new(Array3::from_shape_fn((c, h, w), |_| rng.random_range(-3.0..3.0)), t0(), false)
    }

    #[test]
    fn rmse_against_double_loop() {
        let grid = GridSpec::regular(4, 8, false).unwrap();
        let (f, t) = (random_state(3, 4, 8, 1), random_state(3, 4, 8, 2));
        let lat_w = grid.latitude_weights();
        for c in 0..3 {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..8 {
                    s += lat_w[i] * (f.values[[c, i, j]] - t.values[[c, i, j]]).powi(2);
                }
            }
            let want = (s / 32.0).sqrt();
            assert!((weighted_rmse(&f, &t, &grid, c).unwrap() - want).abs() < 1e-12);
        }
        assert_eq!(weighted_rmse(&f, &f, &grid, 0).unwrap(), 0.0);
        let shifted = StateField::new(&f.values + 0.25, t0(), false);
        assert!((weighted_rmse(&shifted, &f, &grid, 1).unwrap() - 0.25).abs() < 1e-12);
        assert!(weighted_rmse(&f, &random_state(3, 4, 6, 2), &grid, 0).is_err());
    }

    #[test]
    fn pure_harmonic_lands_on_its_wavenumber() {
        let grid = GridSpec::regular(5, 64, false).unwrap();
        for m in [0usize, 1, 5, 31, 32] {
            let f = Array2::from_shape_fn((5, 64), |(i, j)| {
                if i == 2 {
                    1.7 * (m as f64 * grid.longitudes()[j].to_radians()).cos()
                } else {
                    0.0
                }
            });
            let s = zonal_power_spectrum(f.view(), &grid, (-1.0, 1.0)).unwrap();
            let total: f64 = s.energy.iter().sum();
            assert!(s.energy[m] / total > 0.999, "m = {m}");
        }
        let c = Array2::from_elem((5, 64), 2.0);
        let s = zonal_power_spectrum(c.view(), &grid, (-60.0, 60.0)).unwrap();
        assert!((s.energy[0] - 4.0).abs() < 1e-12);
        assert!(s.energy[1..].iter().all(|&e| e < 1e-20));
        assert!(zonal_power_spectrum(c.view(), &grid, (80.0, 85.0)).is_err());
    }

    proptest! {
        #[test]
        fn parseval_and_rotation_invariance(seed in 0u64..1000, shift in 0usize..16, odd in any::<bool>()) {
            let n = if odd { 15 } else { 16 };
            let grid = GridSpec::regular(6, n, false).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Array2::from_shape_fn((6, n), |_| rng.random_range(-2.0..2.0));
            let band = (-60.0, 60.0);
            let s = zonal_power_spectrum(f.view(), &grid, band).unwrap();
            let w = grid.latitude_weights();
            let rows: Vec<usize> = (0..6).filter(|&i| grid.latitudes()[i].abs() <= 60.0).collect();
            let wsum: f64 = rows.iter().map(|&i| w[i]).sum();
            let direct: f64 = rows.iter().map(|&i| w[i] / wsum * f.row(i).iter().map(|v| v * v).sum::<f64>() / n as f64).sum();
            prop_assert!((s.energy.iter().sum::<f64>() - direct).abs() < 1e-10);
            let rolled = Array2::from_shape_fn((6, n), |(i, j)| f[[i, (j + shift) % n]]);
            let r = zonal_power_spectrum(rolled.view(), &grid, band).unwrap();
            for (a, b) in s.energy.iter().zip(&r.energy) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    fn constant_state(reg: &VariableRegistry, vals: [(&str, f64); 5]) -> StateField {
        let mut v = Array3::zeros((reg.n_channels(), 2, 4));
        for (name, x) in vals {
            for &p in &reg.levels {
                v.index_axis_mut(Axis(0), reg.pressure_index(name, p).unwrap()).fill(x);
            }
        }
        StateField::new(v, t0(), false)
    }

    #[test]
    fn constant_profiles_integrate_exactly() {
        let reg = registry();
        let grid = GridSpec::regular(2, 4, false).unwrap();
        let (t, q, z) = (280.0, 0.01, 5.0e4);
        let s = constant_state(&reg, [("Z", z), ("Q", q), ("T", t), ("U", 3.0), ("V", 4.0)]);
        let e = energy_components(&s, &grid, &reg).unwrap();
        let span = (850.0 - 200.0) * 100.0 / GRAVITY;
        let tc = t - 273.15;
        assert!((e.kinetic - 12.5 * span).abs() < 1e-9 * e.kinetic);
        assert!((e.potential - z * span).abs() < 1e-9 * e.potential);
        assert!((e.internal - (1.0 - q) * CV_AIR * tc * span).abs() < 1e-9 * e.internal);
        assert!((e.latent - (LV0 - LV_SLOPE * tc) * q * span).abs() < 1e-9 * e.latent);
    }

    #[test]
    fn linear_profile_is_integrated_exactly() {
        let reg = registry();
        let grid = GridSpec::regular(2, 4, false).unwrap();
        let mut s = constant_state(&reg, [("Z", 0.0), ("Q", 0.0), ("T", 273.15), ("U", 0.0), ("V", 0.0)]);
        // Z = a + b p (p in Pa): exact integral a dp + b (p2^2 - p1^2) / 2.
        let (a, b) = (1.0e4, 0.3);
        for &p in &reg.levels {
            let c = reg.pressure_index("Z", p).unwrap();
            s.values.index_axis_mut(Axis(0), c).fill(a + b * p as f64 * 100.0);
        }
        let e = energy_components(&s, &grid, &reg).unwrap();
        let (p1, p2) = (20_000.0f64, 85_000.0f64);
        let want = (a * (p2 - p1) + b * (p2 * p2 - p1 * p1) / 2.0) / GRAVITY;
        assert!((e.potential - want).abs() < 1e-9 * want);
        assert_eq!(e.kinetic, 0.0);
    }

    #[test]
    fn latent_term_is_linear_in_q() {
        let reg = registry();
        let grid = GridSpec::regular(3, 4, false).unwrap();
        let mut s = random_state(reg.n_channels(), 3, 4, 9);
        for &p in &reg.levels {
            let c = reg.pressure_index("T", p).unwrap();
            s.values.index_axis_mut(Axis(0), c).mapv_inplace(|v| 260.0 + 5.0 * v);
            let c = reg.pressure_index("Q", p).unwrap();
            s.values.index_axis_mut(Axis(0), c).mapv_inplace(|v| 0.004 + 0.001 * v);
        }
        let e1 = energy_components(&s, &grid, &reg).unwrap();
        for &p in &reg.levels {
            let c = reg.pressure_index("Q", p).unwrap();
            s.values.index_axis_mut(Axis(0), c).mapv_inplace(|v| 2.0 * v);
        }
        let e2 = energy_components(&s, &grid, &reg).unwrap();
        assert_eq!(e2.latent, 2.0 * e1.latent);
        assert_eq!(e2.kinetic, e1.kinetic);
    }

    #[test]
    fn missing_channels_are_named() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        let reg = VariableRegistry::new(s(&["MSLP"]), s(&["U", "V"]), vec![500, 850], vec![], vec![]).unwrap();
        let grid = GridSpec::regular(2, 4, false).unwrap();
        let st = random_state(reg.n_channels(), 2, 4, 1);
        assert!(matches!(energy_components(&st, &grid, &reg), Err(DiagError::MissingChannel(c)) if c == "T500"));
        assert!(domain_mean_kinetic_energy(&st, &grid, &reg).unwrap() > 0.0);
    }

    #[test]
    fn detector_cases() {
        let times = hourly(72);
        let smooth: Vec<f64> = (0..72).map(|h| (2.0 * std::f64::consts::PI * h as f64 / 24.0).sin()).collect();
        let r = discontinuity_score(&times, &smooth, &DEFAULT_BOUNDARY_HOURS, 3.0).unwrap();
        assert_eq!(r.scores.len(), 6);
        assert!(!r.any_flag());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = 0.0;
        let mut series = Vec::new();
        for h in 0..72 {
            x += rng.random_range(-1.0..1.0);
            if h == 45 {
                x += 10.0 * 0.58;
            }
            series.push(x);
        }
        let r = discontinuity_score(&times, &series, &DEFAULT_BOUNDARY_HOURS, 3.0).unwrap();
        assert_eq!(r.flagged(), vec![times[45]]);

        let r = discontinuity_score(&times, &[1.0; 72], &DEFAULT_BOUNDARY_HOURS, 3.0).unwrap();
        assert!(r.scores.iter().all(|s| s.z == 0.0 && !s.flag));

        assert!(matches!(
            discontinuity_score(&times[..40], &smooth[..40], &DEFAULT_BOUNDARY_HOURS, 3.0),
            Err(DiagError::TooShort { .. })
        ));
        let mut gappy = times.clone();
        gappy[10] += Duration::minutes(30);
        assert!(discontinuity_score(&gappy, &smooth, &DEFAULT_BOUNDARY_HOURS, 3.0).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rmse.csv");
        let rows = vec![
            RmseRow { lead_hour: 1, channel: "T850".into(), value: 0.5 },
            RmseRow { lead_hour: 2, channel: "T850".into(), value: 0.75 },
        ];
        write_csv(&p, &rows).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("lead_hour,channel,value\n"));
        assert_eq!(read_csv::<RmseRow>(&p).unwrap(), rows);
    }
}
