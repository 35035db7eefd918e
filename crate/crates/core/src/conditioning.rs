//! Static and clock conditioning channels fed alongside the surface state.
//!
//! Nothing here goes through `NormStats`: every channel is built directly in
//! `[0, 1]` or `[-1, 1]`.

use chrono::{DateTime, Datelike, Timelike, Utc};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use thiserror::Error;

use crate::grid::{GridSpec, VariableRegistry};

#[derive(Debug, Error, PartialEq)]
pub enum CondError {
    #[error("static field {0} is neither stored in the dataset nor computable")]
    MissingStatic(String),
    #[error("unknown clock variable {0}")]
    UnknownClock(String),
}

/// Static fields that are derived from the grid rather than stored.
pub const COMPUTED_STATICS: [&str; 4] = ["SIN_LAT", "COS_LAT", "SIN_LON", "COS_LON"];

/// Source of stored static fields, typically a dataset.
pub trait StaticSource {
    fn static_field(&self, name: &str) -> Option<ArrayView2<'_, f64>>;
}

impl StaticSource for crate::dataset::Dataset {
    fn static_field(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        crate::dataset::Dataset::static_field(self, name)
    }
}

/// No stored statics; only computable fields are available.
pub struct NoStatics;

impl StaticSource for NoStatics {
    fn static_field(&self, _name: &str) -> Option<ArrayView2<'_, f64>> {
        None
    }
}

/// Fraction of the UTC day at `time`, in [0, 1).
pub fn day_fraction(time: &DateTime<Utc>) -> f64 {
    (time.num_seconds_from_midnight() as f64) / 86_400.0
}

/// Fraction of the calendar year at `time`, in [0, 1).
pub fn year_fraction(time: &DateTime<Utc>) -> f64 {
    let days = if time.date_naive().leap_year() { 366.0 } else { 365.0 };
    (time.ordinal0() as f64 + day_fraction(time)) / days
}

/// The time-independent channels, precomputed once per grid.
#[derive(Debug, Clone)]
pub struct StaticChannels {
    fields: Array3<f64>,
}

impl StaticChannels {
    pub fn build(
        grid: &GridSpec,
        registry: &VariableRegistry,
        source: &impl StaticSource,
    ) -> Result<Self, CondError> {
        let (h, w) = (grid.n_lat(), grid.n_lon());
        let mut fields = Array3::zeros((registry.static_vars.len(), h, w));
        for (k, name) in registry.static_vars.iter().enumerate() {
            let field: Array2<f64> = match name.as_str() {
                "SIN_LAT" => Array2::from_shape_fn((h, w), |(i, _)| grid.latitudes()[i].to_radians().sin()),
                "COS_LAT" => Array2::from_shape_fn((h, w), |(i, _)| grid.latitudes()[i].to_radians().cos()),
                "SIN_LON" => Array2::from_shape_fn((h, w), |(_, j)| grid.longitudes()[j].to_radians().sin()),
                "COS_LON" => Array2::from_shape_fn((h, w), |(_, j)| grid.longitudes()[j].to_radians().cos()),
                other => {
                    let stored = source
                        .static_field(other)
                        .ok_or_else(|| CondError::MissingStatic(other.to_string()))?;
                    let mut f = stored.to_owned();
                    // Orography is stored as geopotential; bring it to [-1, 1].
                    if other == "ZSFC" {
                        let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                        if peak > 0.0 {
                            f.mapv_inplace(|v| v / peak);
                        }
                    }
                    f
                }
            };
            fields.index_axis_mut(Axis(0), k).assign(&field);
        }
        Ok(Self { fields })
    }

    pub fn len(&self) -> usize {
        self.fields.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Full conditioning stack (statics then clock channels) at `time`.
    pub fn at(
        &self,
        grid: &GridSpec,
        registry: &VariableRegistry,
        time: &DateTime<Utc>,
    ) -> Result<Array3<f64>, CondError> {
        let (h, w) = (grid.n_lat(), grid.n_lon());
        let ns = self.len();
        let mut out = Array3::zeros((ns + registry.clock_vars.len(), h, w));
        out.slice_mut(ndarray::s![..ns, .., ..]).assign(&self.fields);
        let day = day_fraction(time);
        let year = std::f64::consts::TAU * year_fraction(time);
        for (k, name) in registry.clock_vars.iter().enumerate() {
            let mut ch = out.index_axis_mut(Axis(0), ns + k);
            match name.as_str() {
                "SIN_TOD" | "COS_TOD" => {
                    let sin = name == "SIN_TOD";
                    for (j, &lon) in grid.longitudes().iter().enumerate() {
                        // Local solar time advances one hour per 15 degrees east.
                        let local = (day + lon / 360.0).rem_euclid(1.0);
                        let phase = std::f64::consts::TAU * local;
                        let v = if sin { phase.sin() } else { phase.cos() };
                        ch.column_mut(j).fill(v);
                    }
                }
                "SIN_YEAR" => ch.fill(year.sin()),
                "COS_YEAR" => ch.fill(year.cos()),
                other => return Err(CondError::UnknownClock(other.to_string())),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn registry() -> VariableRegistry {
        VariableRegistry::new(
            vec!["MSLP".into()],
            vec!["T".into()],
            vec![850],
            vec!["SIN_LAT".into(), "COS_LON".into()],
            vec!["SIN_TOD".into(), "COS_TOD".into(), "SIN_YEAR".into(), "COS_YEAR".into()],
        )
        .unwrap()
    }

    #[test]
    fn local_time_follows_longitude() {
        let grid = GridSpec::regular(3, 8, false).unwrap();
        let reg = registry();
        let st = StaticChannels::build(&grid, &reg, &NoStatics).unwrap();
        let t = Utc.with_ymd_and_hms(2021, 3, 1, 0, 0, 0).unwrap();
        let c = st.at(&grid, &reg, &t).unwrap();
        assert_eq!(c.dim(), (6, 3, 8));
        // Midnight UTC at 0E, local noon at 180E.
        assert!((c[[3, 0, 0]] - 1.0).abs() < 1e-12);
        assert!((c[[3, 1, 4]] + 1.0).abs() < 1e-12);
        // Six hours later the 0E column reads like 90E did.
        let c6 = st.at(&grid, &reg, &(t + chrono::Duration::hours(6))).unwrap();
        assert!((c6[[2, 0, 0]] - c[[2, 0, 2]]).abs() < 1e-12);
        for v in c.iter() {
            assert!((-1.0..=1.0).contains(v));
        }
    }

    #[test]
    fn year_fraction_bounds() {
        let t = Utc.with_ymd_and_hms(2020, 12, 31, 23, 0, 0).unwrap();
        let f = year_fraction(&t);
        assert!(f < 1.0 && f > 0.99);
        assert_eq!(year_fraction(&Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap()), 0.0);
    }

    #[test]
    fn missing_static_is_reported() {
        let grid = GridSpec::regular(3, 8, false).unwrap();
        let mut reg = registry();
        reg.static_vars = vec!["LSM".into()];
        assert_eq!(
            StaticChannels::build(&grid, &reg, &NoStatics).unwrap_err(),
            CondError::MissingStatic("LSM".into())
        );
    }
}
