use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use chrono::{DateTime, Duration, Utc};
use flowcast::cyclone::{
    read_reference_tracks, track, track_rows, CriteriaConfig, CycloneError, CycloneFields, TrackPoint,
};
use flowcast::dataset::{parse_time, Dataset};
use flowcast::diagnostics::{
    discontinuity_score, domain_mean_kinetic_energy, energy_components, weighted_rmse, write_csv, zonal_power_spectrum,
    DiagError, JumpRow, RmseRow, SpectrumRow, DEFAULT_BOUNDARY_HOURS, DEFAULT_Z_THRESHOLD, SPECTRUM_NORMALIZATION,
};
use ndarray::Axis;

use crate::manifest::RunManifest;
use crate::{CliResult, ExitCodeExt, Failure, Kind, EXIT_ERROR, EXIT_USAGE};

pub struct Args {
    pub kind: Kind,
    pub forecast: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub channels: Vec<String>,
    pub lat_band: (f64, f64),
    pub track_init: Option<(f64, f64)>,
    pub reference: Option<PathBuf>,
    pub storm_id: String,
}

fn diag_err(e: DiagError) -> Failure {
    let code = match e {
        DiagError::MissingChannel(_)
        | DiagError::GridMismatch(_)
        | DiagError::EmptyBand(_)
        | DiagError::TooShort { .. }
        | DiagError::NotHourly(_)
        | DiagError::TooFewLevels => EXIT_USAGE,
        DiagError::Csv(_) => EXIT_ERROR,
    };
    Failure::new(code, e)
}

fn cyclone_err(e: CycloneError) -> Failure {
    let code = match e {
        CycloneError::Csv(_) => EXIT_ERROR,
        _ => EXIT_USAGE,
    };
    Failure::new(code, e)
}

fn load(path: &Path) -> CliResult<Dataset> {
    Dataset::read(path)
        .with_context(|| format!("cannot read dataset {}", path.display()))
        .code(EXIT_ERROR)
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str, kind: Kind) -> CliResult<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Failure::usage(format!("--kind {kind:?} needs {flag}").to_lowercase()))
}

/// Initialization time of a forecast directory, or one hour before its first state.
fn init_time(ds: &Dataset) -> CliResult<DateTime<Utc>> {
    if let Some(s) = ds.config.get("forecast.init_time") {
        return parse_time(s).code(EXIT_USAGE);
    }
    ds.states
        .first()
        .map(|s| s.timestamp - Duration::hours(1))
        .ok_or_else(|| Failure::usage("forecast has no states"))
}

fn lead_hours(t: DateTime<Utc>, init: DateTime<Utc>) -> i64 {
    (t - init).num_hours()
}

pub fn run(args: Args, out: &Path, started: Instant) -> CliResult<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .code(EXIT_ERROR)?;
    let mut m = RunManifest::new(
        "evaluate",
        Some(&format!("kind={:?}\nchannels={:?}\nlat_band={:?}\n", args.kind, args.channels, args.lat_band)),
        0,
    );
    for p in [&args.forecast, &args.data, &args.reference].into_iter().flatten() {
        m.inputs.push(p.display().to_string());
    }
    let csv = match args.kind {
        Kind::Rmse => rmse(&args, out)?,
        Kind::Spectrum => {
            m.extra.insert("spectrum_normalization".into(), SPECTRUM_NORMALIZATION.into());
            spectrum(&args, out)?
        }
        Kind::Energy => {
            m.extra
                .insert("energy_constants".into(), flowcast::diagnostics::energy_constants());
            energy(&args, out)?
        }
        Kind::Jumps => jumps(&args, out, &mut m)?,
        Kind::Track => tracks(&args, out, &mut m)?,
    };
    log::info!("wrote {}", csv.display());
    m.outputs.push(csv.display().to_string());
    m.finish(out, started)
}

/// The forecast if given, otherwise the truth dataset.
fn subject(args: &Args) -> CliResult<Dataset> {
    match (&args.forecast, &args.data) {
        (Some(p), _) | (None, Some(p)) => load(p),
        (None, None) => Err(Failure::usage("need --forecast or --data")),
    }
}

fn rmse(args: &Args, out: &Path) -> CliResult<PathBuf> {
    let fc = load(need(&args.forecast, "--forecast", args.kind)?)?;
    let truth = load(need(&args.data, "--data", args.kind)?)?;
    if fc.grid != truth.grid {
        return Err(diag_err(DiagError::GridMismatch("forecast and truth grids differ".into())));
    }
    let init = init_time(&fc)?;
    let names = fc.registry.channel_names();
    let pairs: Vec<(usize, usize)> = names
        .iter()
        .enumerate()
        .map(|(c, n)| {
            truth
                .registry
                .channel_index(n)
                .map(|t| (c, t))
                .ok_or_else(|| diag_err(DiagError::MissingChannel(n.clone())))
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for f in &fc.states {
        let Some(k) = truth.index_of(&f.timestamp) else {
            log::warn!("no truth at {}", f.timestamp);
            continue;
        };
        let t = &truth.states[k];
        for &(c, tc) in &pairs {
            // Reorder the truth channel into the forecast's layout.
            let mut tt = f.clone();
            tt.values
                .index_axis_mut(Axis(0), c)
                .assign(&t.values.index_axis(Axis(0), tc));
            rows.push(RmseRow {
                lead_hour: lead_hours(f.timestamp, init).max(0) as usize,
                channel: names[c].clone(),
                value: weighted_rmse(f, &tt, &fc.grid, c).map_err(diag_err)?,
            });
        }
    }
    if rows.is_empty() {
        return Err(Failure::usage("forecast and truth share no timestamps"));
    }
    let path = out.join("rmse.csv");
    write_csv(&path, &rows).map_err(diag_err)?;
    Ok(path)
}

fn spectrum(args: &Args, out: &Path) -> CliResult<PathBuf> {
    let ds = subject(args)?;
    let names = ds.registry.channel_names();
    let chans: Vec<usize> = if args.channels.is_empty() {
        (0..names.len()).collect()
    } else {
        args.channels
            .iter()
            .map(|n| {
                ds.registry
                    .channel_index(n)
                    .ok_or_else(|| diag_err(DiagError::MissingChannel(n.clone())))
            })
            .collect::<Result<_, _>>()?
    };
    let init = if args.forecast.is_some() {
        init_time(&ds)?
    } else {
        ds.states.first().map(|s| s.timestamp).unwrap_or_default()
    };
    let mut rows = Vec::new();
    for s in &ds.states {
        let lead_day = lead_hours(s.timestamp, init) as f64 / 24.0;
        for &c in &chans {
            let r = zonal_power_spectrum(s.values.index_axis(Axis(0), c), &ds.grid, args.lat_band).map_err(diag_err)?;
            for (m, e) in r.wavenumbers.iter().zip(&r.energy) {
                rows.push(SpectrumRow {
                    wavenumber: *m,
                    energy: *e,
                    lead_day,
                    channel: names[c].clone(),
                });
            }
        }
    }
    let path = out.join("spectrum.csv");
    write_csv(&path, &rows).map_err(diag_err)?;
    Ok(path)
}

fn energy(args: &Args, out: &Path) -> CliResult<PathBuf> {
    let ds = subject(args)?;
    let rows = ds
        .states
        .iter()
        .map(|s| energy_components(s, &ds.grid, &ds.registry))
        .collect::<Result<Vec<_>, _>>()
        .map_err(diag_err)?;
    let path = out.join("energy.csv");
    write_csv(&path, &rows).map_err(diag_err)?;
    Ok(path)
}

fn jumps(args: &Args, out: &Path, m: &mut RunManifest) -> CliResult<PathBuf> {
    let ds = subject(args)?;
    let ke = ds
        .states
        .iter()
        .map(|s| domain_mean_kinetic_energy(s, &ds.grid, &ds.registry))
        .collect::<Result<Vec<_>, _>>()
        .map_err(diag_err)?;
    let report =
        discontinuity_score(&ds.timestamps(), &ke, &DEFAULT_BOUNDARY_HOURS, DEFAULT_Z_THRESHOLD).map_err(diag_err)?;
    let rows: Vec<JumpRow> = report.scores.iter().map(JumpRow::from).collect();
    m.extra.insert("median_increment".into(), report.median.into());
    m.extra.insert("flag_count".into(), report.flagged().len().into());
    let path = out.join("jumps.csv");
    write_csv(&path, &rows).map_err(diag_err)?;
    Ok(path)
}

/// Cyclone fields every `step` hours counted from `t0`.
fn frames(
    ds: &Dataset,
    land: Option<ndarray::ArrayView2<f64>>,
    t0: DateTime<Utc>,
    step: u32,
) -> CliResult<Vec<(DateTime<Utc>, CycloneFields)>> {
    ds.states
        .iter()
        .filter(|s| lead_hours(s.timestamp, t0).rem_euclid(step as i64) == 0)
        .map(|s| Ok((s.timestamp, CycloneFields::from_state(s, &ds.grid, &ds.registry, land).map_err(cyclone_err)?)))
        .collect()
}

fn tracks(args: &Args, out: &Path, m: &mut RunManifest) -> CliResult<PathBuf> {
    let init = args
        .track_init
        .ok_or_else(|| Failure::usage("--kind track needs --track-lat and --track-lon"))?;
    let fc = subject(args)?;
    let truth = match &args.data {
        Some(p) if args.forecast.is_some() => Some(load(p)?),
        _ => None,
    };
    let land = truth
        .as_ref()
        .and_then(|t| t.static_field("LSM"))
        .or_else(|| fc.static_field("LSM"));
    let cfg = CriteriaConfig::default();
    let t0 = if args.forecast.is_some() {
        init_time(&fc)?
    } else {
        fc.states.first().map(|s| s.timestamp).unwrap_or_default()
    };
    let fc_track = track(&frames(&fc, land, t0, cfg.step_hours)?, &fc.grid, init, &cfg).map_err(cyclone_err)?;
    let reference: Option<Vec<TrackPoint>> = match (&args.reference, &truth) {
        (Some(p), _) => {
            let mut all = read_reference_tracks(p).map_err(cyclone_err)?;
            let r = all
                .remove(&args.storm_id)
                .or_else(|| all.remove(""))
                .or_else(|| (all.len() == 1).then(|| all.into_values().next().expect("one storm")));
            Some(r.ok_or_else(|| Failure::usage(format!("reference has no storm {}", args.storm_id)))?)
        }
        (None, Some(t)) => {
            let times = fc.timestamps();
            let mut sub = Dataset::new(t.grid.clone(), t.registry.clone());
            sub.states = t.states.iter().filter(|s| times.contains(&s.timestamp)).cloned().collect();
            if sub.states.is_empty() {
                None
            } else {
                Some(track(&frames(&sub, land, t0, cfg.step_hours)?, &t.grid, init, &cfg).map_err(cyclone_err)?.points)
            }
        }
        (None, None) => None,
    };
    let mut rows = track_rows(&args.storm_id, &fc_track, reference.as_deref());
    // Lead hours count from the forecast's initialization, not its first fix.
    if args.forecast.is_some() {
        for (r, p) in rows.iter_mut().zip(&fc_track.points) {
            r.lead_hour = lead_hours(p.time, t0);
        }
    }
    if rows.is_empty() {
        log::warn!("no cyclone fixes: {}", fc_track.termination.label());
    }
    m.extra.insert("termination".into(), fc_track.termination.label().into());
    m.extra.insert("fixes".into(), fc_track.points.len().into());
    let path = out.join("track.csv");
    write_csv(&path, &rows).map_err(|e| Failure::new(EXIT_ERROR, anyhow!("{e}")))?;
    Ok(path)
}
