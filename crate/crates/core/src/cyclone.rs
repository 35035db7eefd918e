//! MSLP-minimum cyclone tracker with vorticity and wind acceptance checks.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSpec, StateField, VariableRegistry};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error, PartialEq)]
pub enum CycloneError {
    #[error("no grid point within {radius_km} km of ({lat}, {lon})")]
    EmptyNeighborhood { lat: f64, lon: f64, radius_km: f64 },
    #[error("missing channel {0}")]
    MissingChannel(String),
    #[error("field shape {found:?} does not match the grid {expected:?}")]
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("tracks share no timestamps")]
    NoOverlap,
    #[error("frames are not in time order")]
    Unordered,
    #[error("invalid criteria: {0}")]
    Config(String),
    #[error("csv {0}")]
    Csv(String),
}

/// Great-circle distance on a sphere of radius 6371 km.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let a = ((p2 - p1) / 2.0).sin().powi(2) + p1.cos() * p2.cos() * ((lon2 - lon1).to_radians() / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub time: DateTime<Utc>,
    pub lat: f64,
    pub lon: f64,
    /// Pa.
    pub mslp_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriteriaConfig {
    /// s^-1, compared with the hemisphere-signed 850 hPa vorticity.
    pub vort_threshold: f64,
    pub criteria_radius_km: f64,
    /// m/s, 10 m wind, applied over land only.
    pub wind_threshold: f64,
    pub search_radius_km: f64,
    pub step_hours: u32,
    /// Minimum 850-200 hPa thickness maximum (m) to accept; unset means report only.
    pub thickness_threshold: Option<f64>,
}

impl Default for CriteriaConfig {
    fn default() -> Self {
        Self {
            vort_threshold: 5e-5,
            criteria_radius_km: 278.0,
            wind_threshold: 8.0,
            search_radius_km: 445.0,
            step_hours: 6,
            thickness_threshold: None,
        }
    }
}

impl CriteriaConfig {
    pub fn validate(&self) -> Result<(), CycloneError> {
        if !(self.criteria_radius_km > 0.0 && self.search_radius_km > 0.0) {
            return Err(CycloneError::Config("radii must be positive".into()));
        }
        if self.step_hours == 0 {
            return Err(CycloneError::Config("step_hours must be positive".into()));
        }
        Ok(())
    }
}

fn check_shape(grid: &GridSpec, f: &ArrayView2<f64>) -> Result<(), CycloneError> {
    let expected = (grid.n_lat(), grid.n_lon());
    if f.dim() != expected {
        return Err(CycloneError::Shape {
            expected,
            found: f.dim(),
        });
    }
    Ok(())
}

/// Grid indices within `radius_km` of a point, row-major.
fn neighborhood(grid: &GridSpec, lat: f64, lon: f64, radius_km: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, &la) in grid.latitudes().iter().enumerate() {
        // Rows farther than the radius in latitude alone cannot qualify.
        if (la - lat).abs().to_radians() * EARTH_RADIUS_KM > radius_km {
            continue;
        }
        for (j, &lo) in grid.longitudes().iter().enumerate() {
            if haversine_km(lat, lon, la, lo) <= radius_km {
                out.push((i, j));
            }
        }
    }
    out
}

/// Lowest value within `radius_km` of `center`; ties go to the smallest
/// latitude index, then longitude index. Returns `(i, j, lat, lon, value)`.
pub fn find_mslp_minimum(
    mslp: ArrayView2<f64>,
    grid: &GridSpec,
    center: (f64, f64),
    radius_km: f64,
) -> Result<(usize, usize, f64, f64, f64), CycloneError> {
    check_shape(grid, &mslp)?;
    let mut best: Option<(usize, usize)> = None;
    for (i, j) in neighborhood(grid, center.0, center.1, radius_km) {
        if best.is_none_or(|(bi, bj)| mslp[[i, j]] < mslp[[bi, bj]]) {
            best = Some((i, j));
        }
    }
    let (i, j) = best.ok_or(CycloneError::EmptyNeighborhood {
        lat: center.0,
        lon: center.1,
        radius_km,
    })?;
    Ok((i, j, grid.latitudes()[i], grid.longitudes()[j], mslp[[i, j]]))
}

/// `dv/dx - du/dy` in s^-1 with `dx = R cos(lat) dlon`, `dy = R dlat`.
///
/// Centered differences, wrapping in longitude and one-sided on the first and
/// last rows. The metric term `u tan(lat) / R` is not included, so a constant
/// zonal wind has zero vorticity. Rows at a pole get zero `dv/dx`.
pub fn relative_vorticity(u: ArrayView2<f64>, v: ArrayView2<f64>, grid: &GridSpec) -> Result<Array2<f64>, CycloneError> {
    check_shape(grid, &u)?;
    check_shape(grid, &v)?;
    let (h, w) = u.dim();
    let r = EARTH_RADIUS_KM * 1000.0;
    let lats: Vec<f64> = grid.latitudes().iter().map(|l| l.to_radians()).collect();
    let dlon = grid.lon_spacing().to_radians();
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        let (e, west) = ((j + 1) % w, (j + w - 1) % w);
        let c = lats[i].cos();
        let dvdx = if c > 1e-12 {
            (v[[i, e]] - v[[i, west]]) / (2.0 * dlon * r * c)
        } else {
            0.0
        };
        let (a, b) = match i {
            0 => (0, 1),
            _ if i + 1 == h => (h - 2, h - 1),
            _ => (i - 1, i + 1),
        };
        let dudy = (u[[a, j]] - u[[b, j]]) / (r * (lats[a] - lats[b]));
        dvdx - dudy
    }))
}

/// The fields one tracking step looks at, each `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct CycloneFields {
    pub mslp: Array2<f64>,
    pub vort850: Array2<f64>,
    pub wind10: Array2<f64>,
    /// 850-200 hPa thickness in m, when both geopotentials are available.
    pub thickness: Option<Array2<f64>>,
    pub land: Option<Array2<f64>>,
}

impl CycloneFields {
    pub fn new(
        grid: &GridSpec,
        mslp: Array2<f64>,
        u850: ArrayView2<f64>,
        v850: ArrayView2<f64>,
        u10: ArrayView2<f64>,
        v10: ArrayView2<f64>,
        land: Option<Array2<f64>>,
    ) -> Result<Self, CycloneError> {
        check_shape(grid, &mslp.view())?;
        check_shape(grid, &u10)?;
        check_shape(grid, &v10)?;
        Ok(Self {
            vort850: relative_vorticity(u850, v850, grid)?,
            wind10: ndarray::Zip::from(&u10).and(&v10).map_collect(|a, b| a.hypot(*b)),
            mslp,
            thickness: None,
            land,
        })
    }

    /// Extracts MSLP, U850, V850, U10M, V10M (and Z850/Z200 if present) from a
    /// physical-unit state.
    pub fn from_state(
        state: &StateField,
        grid: &GridSpec,
        registry: &VariableRegistry,
        land: Option<ArrayView2<f64>>,
    ) -> Result<Self, CycloneError> {
        let get = |name: &str| {
            registry
                .channel_index(name)
                .map(|c| state.values.index_axis(Axis(0), c))
                .ok_or_else(|| CycloneError::MissingChannel(name.into()))
        };
        let mut f = Self::new(
            grid,
            get("MSLP")?.to_owned(),
            get("U850")?,
            get("V850")?,
            get("U10M")?,
            get("V10M")?,
            land.map(|l| l.to_owned()),
        )?;
        if let (Ok(z850), Ok(z200)) = (get("Z850"), get("Z200")) {
            f.thickness = Some((&z200 - &z850) / crate::diagnostics::GRAVITY);
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaReport {
    pub accepted: bool,
    /// Largest vorticity in the hemisphere's cyclonic sense within the radius, signed.
    pub vort_extreme: f64,
    pub wind_max: f64,
    pub over_land: bool,
    pub thickness_max: Option<f64>,
    pub reasons: Vec<String>,
}

/// Applies the acceptance criteria around a candidate centre.
pub fn check_criteria(
    fields: &CycloneFields,
    grid: &GridSpec,
    lat: f64,
    lon: f64,
    cfg: &CriteriaConfig,
) -> Result<CriteriaReport, CycloneError> {
    cfg.validate()?;
    let near = neighborhood(grid, lat, lon, cfg.criteria_radius_km);
    if near.is_empty() {
        return Err(CycloneError::EmptyNeighborhood {
            lat,
            lon,
            radius_km: cfg.criteria_radius_km,
        });
    }
    let south = lat < 0.0;
    let vort_extreme = near
        .iter()
        .map(|&ij| fields.vort850[ij])
        .fold(if south { f64::INFINITY } else { f64::NEG_INFINITY }, |a, b| {
            if south {
                a.min(b)
            } else {
                a.max(b)
            }
        });
    let wind_max = near.iter().map(|&ij| fields.wind10[ij]).fold(0.0, f64::max);
    let (ci, cj) = nearest_point(grid, lat, lon);
    let over_land = fields.land.as_ref().is_some_and(|l| l[[ci, cj]] >= 0.5);
    let thickness_max = fields
        .thickness
        .as_ref()
        .map(|t| near.iter().map(|&ij| t[ij]).fold(f64::NEG_INFINITY, f64::max));
    let mut reasons = Vec::new();
    let vort_ok = if south {
        vort_extreme < -cfg.vort_threshold
    } else {
        vort_extreme > cfg.vort_threshold
    };
    if !vort_ok {
        reasons.push(format!("vorticity {vort_extreme:.3e} s^-1 does not pass {:.1e}", cfg.vort_threshold));
    }
    if over_land && wind_max <= cfg.wind_threshold {
        reasons.push(format!("10 m wind {wind_max:.2} m/s over land not above {}", cfg.wind_threshold));
    }
    if let Some(thr) = cfg.thickness_threshold {
        if thickness_max.is_none_or(|t| t < thr) {
            reasons.push(format!("thickness {thickness_max:?} m below {thr}"));
        }
    }
    Ok(CriteriaReport {
        accepted: reasons.is_empty(),
        vort_extreme,
        wind_max,
        over_land,
        thickness_max,
        reasons,
    })
}

fn nearest_point(grid: &GridSpec, lat: f64, lon: f64) -> (usize, usize) {
    let mut best = (0, 0, f64::INFINITY);
    for (i, &la) in grid.latitudes().iter().enumerate() {
        for (j, &lo) in grid.longitudes().iter().enumerate() {
            let d = haversine_km(lat, lon, la, lo);
            if d < best.2 {
                best = (i, j, d);
            }
        }
    }
    (best.0, best.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Termination {
    /// Every frame produced a fix.
    EndOfData,
    /// No minimum in the search area passed the criteria.
    CriteriaFailed { time: DateTime<Utc>, reasons: Vec<String> },
    /// The search area held no grid point.
    EmptyNeighborhood { time: DateTime<Utc> },
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::EndOfData => "end of data",
            Termination::CriteriaFailed { .. } => "criteria failed",
            Termination::EmptyNeighborhood { .. } => "empty neighborhood",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub points: Vec<TrackPoint>,
    pub termination: Termination,
}

/// Follows a cyclone through time-ordered frames, starting the search at
/// `init` and then at each accepted fix.
pub fn track(
    frames: &[(DateTime<Utc>, CycloneFields)],
    grid: &GridSpec,
    init: (f64, f64),
    cfg: &CriteriaConfig,
) -> Result<Track, CycloneError> {
    cfg.validate()?;
    if frames.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(CycloneError::Unordered);
    }
    let mut points = Vec::new();
    let mut center = init;
    for (time, f) in frames {
        let (_, _, lat, lon, value) = match find_mslp_minimum(f.mslp.view(), grid, center, cfg.search_radius_km) {
            Ok(m) => m,
            Err(CycloneError::EmptyNeighborhood { .. }) => {
                return Ok(Track {
                    points,
                    termination: Termination::EmptyNeighborhood { time: *time },
                })
            }
            Err(e) => return Err(e),
        };
        let report = check_criteria(f, grid, lat, lon, cfg)?;
        if !report.accepted {
            return Ok(Track {
                points,
                termination: Termination::CriteriaFailed {
                    time: *time,
                    reasons: report.reasons,
                },
            });
        }
        points.push(TrackPoint {
            time: *time,
            lat,
            lon,
            mslp_min: value,
        });
        center = (lat, lon);
    }
    Ok(Track {
        points,
        termination: Termination::EndOfData,
    })
}

/// Distance to the reference at every shared timestamp, keyed by lead hour
/// from the first fix of `track`.
pub fn track_errors(track: &[TrackPoint], reference: &[TrackPoint]) -> Result<Vec<(i64, f64)>, CycloneError> {
    let Some(first) = track.first() else {
        return Err(CycloneError::NoOverlap);
    };
    let out: Vec<(i64, f64)> = track
        .iter()
        .filter_map(|p| {
            reference.iter().find(|r| r.time == p.time).map(|r| {
                (
                    (p.time - first.time).num_hours(),
                    haversine_km(p.lat, p.lon, r.lat, r.lon),
                )
            })
        })
        .collect();
    if out.is_empty() {
        return Err(CycloneError::NoOverlap);
    }
    Ok(out)
}

/// Mean distance per lead hour over storms, with the number of storms at each lead.
pub fn track_mae(per_storm: &[Vec<(i64, f64)>]) -> Vec<(i64, f64, usize)> {
    let mut acc: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for storm in per_storm {
        for &(lead, d) in storm {
            let e = acc.entry(lead).or_default();
            e.0 += d;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(l, (s, n))| (l, s / n as f64, n)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub storm_id: String,
    pub lead_hour: i64,
    pub lat: f64,
    pub lon: f64,
    pub mslp: f64,
    pub distance_km: Option<f64>,
}

/// Rows for the track CSV; distances are filled where the reference has the same time.
pub fn track_rows(storm_id: &str, track: &Track, reference: Option<&[TrackPoint]>) -> Vec<TrackRow> {
    let Some(first) = track.points.first() else {
        return Vec::new();
    };
    track
        .points
        .iter()
        .map(|p| TrackRow {
            storm_id: storm_id.into(),
            lead_hour: (p.time - first.time).num_hours(),
            lat: p.lat,
            lon: p.lon,
            mslp: p.mslp_min,
            distance_km: reference
                .and_then(|r| r.iter().find(|q| q.time == p.time))
                .map(|q| haversine_km(p.lat, p.lon, q.lat, q.lon)),
        })
        .collect()
}

/// Reference track input: `time,lat,lon` with optional `storm_id` and `mslp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    #[serde(default)]
    pub storm_id: Option<String>,
    pub time: DateTime<Utc>,
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub mslp: Option<f64>,
}

/// Reads a reference track CSV and groups it by storm (empty id when absent),
/// each storm sorted by time.
pub fn read_reference_tracks(path: &Path) -> Result<BTreeMap<String, Vec<TrackPoint>>, CycloneError> {
    let err = |e: csv::Error| CycloneError::Csv(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut out: BTreeMap<String, Vec<TrackPoint>> = BTreeMap::new();
    for row in r.deserialize::<ReferenceRow>() {
        let row = row.map_err(err)?;
        out.entry(row.storm_id.unwrap_or_default()).or_default().push(TrackPoint {
            time: row.time,
            lat: row.lat,
            lon: row.lon.rem_euclid(360.0),
            mslp_min: row.mslp.unwrap_or(f64::NAN),
        });
    }
    for v in out.values_mut() {
        v.sort_by_key(|p| p.time);
    }
    Ok(out)
}
