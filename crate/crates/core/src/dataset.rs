//! Directory-based gridded dataset format.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.txt                  key = value header, then [variables], [timestamps], [config]
//! <ISO-8601 timestamp>.f32      one C x H x W little-endian float32 array per timestep
//! static.f32                    optional, |static data vars| x H x W
//! norm_stats.txt                optional, see NormStats::to_text
//! ```
//!
//! Values are held as f64 in memory and stored as f32; anything read back from
//! disk is exactly representable, so read -> write -> read is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Timelike, Utc};
use ndarray::Array3;
use thiserror::Error;

use crate::grid::{GridError, GridSpec, NormStats, StateField, VariableRegistry};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const STATIC_FILE: &str = "static.f32";
pub const STATS_FILE: &str = "norm_stats.txt";
const FORMAT_TAG: &str = "flowcast-dataset/1";
const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{path}: expected {expected} bytes, found {found}")]
    Size {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("timestamps must be strictly increasing")]
    Unordered,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn format_time(t: &DateTime<Utc>) -> String {
    t.format(TIME_FORMAT).to_string()
}

pub fn parse_time(s: &str) -> Result<DateTime<Utc>, DatasetError> {
    NaiveDateTime::parse_from_str(s.trim(), TIME_FORMAT)
        .map(|n| n.and_utc())
        .map_err(|e| DatasetError::Manifest(format!("bad timestamp {s:?}: {e}")))
}

/// Units string for a known variable name.
pub fn default_units(var: &str) -> &'static str {
    match var {
        "Z" | "ZSFC" => "m2 s-2",
        "Q" => "kg kg-1",
        "T" | "T2M" | "TD2M" => "K",
        "U" | "V" | "U10M" | "V10M" => "m s-1",
        "MSLP" => "Pa",
        "TP" => "kg m-2",
        _ => "1",
    }
}

/// An in-memory gridded dataset with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub registry: VariableRegistry,
    pub states: Vec<StateField>,
    /// Names of the stored static data fields (a prefix of the registry's static vars).
    pub static_names: Vec<String>,
    pub statics: Option<Array3<f64>>,
    pub norm_stats: Option<NormStats>,
    pub norm_provenance: String,
    /// Free-form key/value echo, e.g. the generator configuration.
    pub config: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(grid: GridSpec, registry: VariableRegistry) -> Self {
        Self {
            grid,
            registry,
            states: Vec::new(),
            static_names: Vec::new(),
            statics: None,
            norm_stats: None,
            norm_provenance: "none".into(),
            config: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn timestamps(&self) -> Vec<DateTime<Utc>> {
        self.states.iter().map(|s| s.timestamp).collect()
    }

    pub fn index_of(&self, t: &DateTime<Utc>) -> Option<usize> {
        self.states.binary_search_by(|s| s.timestamp.cmp(t)).ok()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        self.registry.validate()?;
        for s in &self.states {
            s.check(&self.grid, &self.registry)?;
        }
        if self.states.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(DatasetError::Unordered);
        }
        if let Some(st) = &self.statics {
            let expected = (self.static_names.len(), self.grid.n_lat(), self.grid.n_lon());
            if st.dim() != expected {
                return Err(GridError::ShapeMismatch {
                    expected,
                    found: st.dim(),
                }
                .into());
            }
        }
        Ok(())
    }

    /// Static data field by name.
    pub fn static_field(&self, name: &str) -> Option<ndarray::ArrayView2<'_, f64>> {
        let i = self.static_names.iter().position(|n| n == name)?;
        self.statics.as_ref().map(|s| s.index_axis(ndarray::Axis(0), i))
    }

    /// View restricted to the given UTC hours, without copying state buffers.
    pub fn hours_view(&self, hours: &[u32]) -> DatasetView<'_> {
        let indices = self
            .states
            .iter()
            .enumerate()
            .filter(|(_, s)| hours.contains(&s.timestamp.hour()) && s.timestamp.minute() == 0)
            .map(|(i, _)| i)
            .collect();
        DatasetView {
            dataset: self,
            indices,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for s in &self.states {
            let path = dir.join(format!("{}.f32", format_time(&s.timestamp)));
            write_f32(&path, s.values.iter().copied())?;
        }
        if let Some(st) = &self.statics {
            write_f32(&dir.join(STATIC_FILE), st.iter().copied())?;
        }
        if let Some(stats) = &self.norm_stats {
            let p = dir.join(STATS_FILE);
            fs::write(&p, stats.to_text()).map_err(io_err(&p))?;
        }
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, self.manifest_text()).map_err(io_err(&p))?;
        Ok(())
    }

    fn manifest_text(&self) -> String {
        let join_f = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let join_s = |v: &[String]| v.join(",");
        let r = &self.registry;
        let mut m = String::new();
        m.push_str(&format!("format = {FORMAT_TAG}\n"));
        m.push_str(&format!("n_lat = {}\n", self.grid.n_lat()));
        m.push_str(&format!("n_lon = {}\n", self.grid.n_lon()));
        m.push_str(&format!("latitudes = {}\n", join_f(self.grid.latitudes())));
        m.push_str(&format!("longitudes = {}\n", join_f(self.grid.longitudes())));
        m.push_str(&format!(
            "levels = {}\n",
            r.levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
        ));
        m.push_str(&format!("surface_vars = {}\n", join_s(&r.surface_vars)));
        m.push_str(&format!("pressure_vars = {}\n", join_s(&r.pressure_vars)));
        m.push_str(&format!("static_vars = {}\n", join_s(&r.static_vars)));
        m.push_str(&format!("clock_vars = {}\n", join_s(&r.clock_vars)));
        m.push_str(&format!("static_data = {}\n", join_s(&self.static_names)));
        m.push_str(&format!("norm_stats = {}\n", self.norm_provenance));
        m.push_str(&format!("n_times = {}\n", self.states.len()));
        m.push_str("\n[variables]\n# index name level units\n");
        for (i, c) in r.channels().iter().enumerate() {
            let level = c.level.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
            m.push_str(&format!("{i} {} {level} {}\n", c.name, default_units(&c.variable)));
        }
        m.push_str("\n[timestamps]\n");
        for s in &self.states {
            m.push_str(&format_time(&s.timestamp));
            m.push('\n');
        }
        m.push_str("\n[config]\n");
        for (k, v) in &self.config {
            m.push_str(&format!("{k} = {v}\n"));
        }
        m
    }

    pub fn read(dir: &Path) -> Result<Self, DatasetError> {
        let manifest = Manifest::read(dir)?;
        let (c, h, w) = (manifest.registry.n_channels(), manifest.grid.n_lat(), manifest.grid.n_lon());
        let mut states = Vec::with_capacity(manifest.timestamps.len());
        for t in &manifest.timestamps {
            let path = dir.join(format!("{}.f32", format_time(t)));
            let data = read_f32(&path, c * h * w)?;
            let values = Array3::from_shape_vec((c, h, w), data).expect("length checked");
            states.push(StateField::new(values, *t, false));
        }
        let statics = if manifest.static_names.is_empty() {
            None
        } else {
            let n = manifest.static_names.len();
            let data = read_f32(&dir.join(STATIC_FILE), n * h * w)?;
            Some(Array3::from_shape_vec((n, h, w), data).expect("length checked"))
        };
        let stats_path = dir.join(STATS_FILE);
        let norm_stats = if stats_path.exists() {
            let text = fs::read_to_string(&stats_path).map_err(io_err(&stats_path))?;
            Some(NormStats::from_text(&text)?)
        } else {
            None
        };
        let ds = Self {
            grid: manifest.grid,
            registry: manifest.registry,
            states,
            static_names: manifest.static_names,
            statics,
            norm_stats,
            norm_provenance: manifest.norm_provenance,
            config: manifest.config,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Parsed manifest without the array payloads.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub grid: GridSpec,
    pub registry: VariableRegistry,
    pub timestamps: Vec<DateTime<Utc>>,
    pub static_names: Vec<String>,
    pub norm_provenance: String,
    pub config: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut header = BTreeMap::new();
        let mut config = BTreeMap::new();
        let mut timestamps = Vec::new();
        let mut section = "";
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = match line {
                    "[variables]" => "variables",
                    "[timestamps]" => "timestamps",
                    "[config]" => "config",
                    other => return Err(DatasetError::Manifest(format!("unknown section {other}"))),
                };
                continue;
            }
            match section {
                "" | "config" => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| DatasetError::Manifest(format!("expected key = value: {line}")))?;
                    let target = if section.is_empty() { &mut header } else { &mut config };
                    target.insert(k.trim().to_string(), v.trim().to_string());
                }
                "timestamps" => timestamps.push(parse_time(line)?),
                // The variable table is derived from the registry; it is informational.
                _ => {}
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| DatasetError::Manifest(format!("missing key {k}")))
        };
        if get("format")? != FORMAT_TAG {
            return Err(DatasetError::Manifest("unsupported format tag".into()));
        }
        let floats = |k: &str| -> Result<Vec<f64>, DatasetError> {
            get(k)?
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| DatasetError::Manifest(format!("{k}: {e}")))
                })
                .collect()
        };
        let names = |k: &str| -> Result<Vec<String>, DatasetError> {
            Ok(get(k)?
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect())
        };
        let grid = GridSpec::new(floats("latitudes")?, floats("longitudes")?)?;
        let n_lat: usize = get("n_lat")?.parse().map_err(|_| DatasetError::Manifest("n_lat".into()))?;
        let n_lon: usize = get("n_lon")?.parse().map_err(|_| DatasetError::Manifest("n_lon".into()))?;
        if n_lat != grid.n_lat() || n_lon != grid.n_lon() {
            return Err(DatasetError::Manifest("grid size disagrees with coordinates".into()));
        }
        let levels = get("levels")?
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<u32>()
                    .map_err(|e| DatasetError::Manifest(format!("levels: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let registry = VariableRegistry::new(
            names("surface_vars")?,
            names("pressure_vars")?,
            levels,
            names("static_vars")?,
            names("clock_vars")?,
        )?;
        let n_times: usize = get("n_times")?
            .parse()
            .map_err(|_| DatasetError::Manifest("n_times".into()))?;
        if n_times != timestamps.len() {
            return Err(DatasetError::Manifest(format!(
                "n_times = {n_times} but {} timestamps listed",
                timestamps.len()
            )));
        }
        Ok(Self {
            grid,
            registry,
            timestamps,
            static_names: names("static_data")?,
            norm_provenance: get("norm_stats")?,
            config,
        })
    }
}

/// Indices into a dataset, sharing its state buffers.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    pub dataset: &'a Dataset,
    pub indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, i: usize) -> &'a StateField {
        &self.dataset.states[self.indices[i]]
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a StateField> + '_ {
        self.indices.iter().map(move |&i| &self.dataset.states[i])
    }
}

/// Writes values as little-endian f32.
pub fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<(), DatasetError> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

pub fn read_f32(path: &Path, expected_len: usize) -> Result<Vec<f64>, DatasetError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() != expected_len * 4 {
        return Err(DatasetError::Size {
            path: path.to_path_buf(),
            expected: expected_len * 4,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

/// Rounds every value to the nearest f32 so that it survives storage unchanged.
pub fn round_to_f32(values: &mut Array3<f64>) {
    values.mapv_inplace(|v| v as f32 as f64);
}
