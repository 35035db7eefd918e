//! `flowcast`: data generation, training, forecasting and evaluation.

mod evaluate;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use flowcast::checkpoint::{sha256_file, Archive};
use flowcast::dataset::{format_time, parse_time, Dataset};
use flowcast::forecast::{ForecastError, Forecaster, MAX_HORIZON_HOURS};
use flowcast::grid::NormStats;
use flowcast::ode::GridConditions;
use flowcast::synth::{generate_trajectory, SynthConfig, SynthError};
use flowcast::train::{train_window, training_stats, TrainConfig, TrainData, TrainError, TrainInit, Trainer};

use manifest::RunManifest;

pub const EXIT_ERROR: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_TRAIN_ABORT: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// An error paired with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Self::new(EXIT_USAGE, anyhow!("{msg}"))
    }
}

pub trait ExitCodeExt<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitCodeExt<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(code, e))
    }
}

pub type CliResult<T> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "flowcast", version, about = "Flow-matching weather forecasting at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic atmosphere dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Assimilation-jump amplitude relative to each channel's spatial std.
        #[arg(long)]
        jump_eps: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1 (block pairs) or stage 2 (autoregressive fine-tuning).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint; required for stage 2.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Continue an interrupted run from `--ckpt` instead of fine-tuning from it.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ar_steps: Option<usize>,
    },
    /// Roll a trained model forward from a state in a dataset.
    Forecast {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset holding the initial state and static fields.
        #[arg(long)]
        data: PathBuf,
        /// Initial time (RFC 3339) or index into the dataset; defaults to the first state.
        #[arg(long)]
        init: Option<String>,
        #[arg(long, default_value_t = 24)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute diagnostics and write CSV files.
    Evaluate {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Forecast directory; `jumps` and `energy` fall back to `--data` without it.
        #[arg(long)]
        forecast: Option<PathBuf>,
        /// Truth dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Channels for `spectrum`; all channels by default.
        #[arg(long, value_delimiter = ',')]
        channels: Vec<String>,
        #[arg(long, default_value_t = -60.0, allow_hyphen_values = true)]
        lat_min: f64,
        #[arg(long, default_value_t = 60.0, allow_hyphen_values = true)]
        lat_max: f64,
        /// Initial cyclone position for `track`.
        #[arg(long, allow_hyphen_values = true)]
        track_lat: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        track_lon: Option<f64>,
        /// Reference track CSV (`time,lat,lon`); without it the truth dataset is tracked.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "storm")]
        storm_id: String,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Rmse,
    Spectrum,
    Energy,
    Jumps,
    Track,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> CliResult<()> {
    let started = Instant::now();
    match cmd {
        Command::GenData {
            config,
            seed,
            jump_eps,
            out,
        } => gen_data(&config, seed, jump_eps, &out, started),
        Command::Train {
            stage,
            config,
            data,
            ckpt,
            resume,
            out,
            seed,
            ar_steps,
        } => train(
            TrainArgs {
                stage,
                config,
                data,
                ckpt,
                resume,
                seed,
                ar_steps,
            },
            &out,
            started,
        ),
        Command::Forecast {
            ckpt,
            data,
            init,
            horizon,
            out,
        } => forecast(&ckpt, &data, init.as_deref(), horizon, &out, started),
        Command::Evaluate {
            kind,
            forecast,
            data,
            out,
            channels,
            lat_min,
            lat_max,
            track_lat,
            track_lon,
            reference,
            storm_id,
        } => evaluate::run(
            evaluate::Args {
                kind,
                forecast,
                data,
                channels,
                lat_band: (lat_min, lat_max),
                track_init: track_lat.zip(track_lon),
                reference,
                storm_id,
            },
            &out,
            started,
        ),
    }
}

fn read_config(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .code(EXIT_USAGE)
}

fn synth_code(e: &SynthError) -> u8 {
    match e {
        SynthError::Config(_) | SynthError::Unstable { .. } => EXIT_USAGE,
        SynthError::NonFinite(_) => EXIT_NUMERIC,
        SynthError::Grid(_) => EXIT_USAGE,
        SynthError::Dataset(_) => EXIT_ERROR,
    }
}

fn gen_data(config: &Path, seed: Option<u64>, jump_eps: Option<f64>, out: &Path, started: Instant) -> CliResult<()> {
    let text = read_config(config)?;
    let mut cfg = SynthConfig::from_toml(&text).map_err(|e| Failure::new(synth_code(&e), e))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = jump_eps {
        cfg.jump_eps = e;
        cfg.jump_eps_channels.clear();
    }
    let ds = generate_trajectory(&cfg, out).map_err(|e| Failure::new(synth_code(&e), e))?;
    log::info!("wrote {} states to {}", ds.len(), out.display());
    let mut m = RunManifest::new("gen-data", Some(&text), cfg.seed);
    m.inputs.push(config.display().to_string());
    m.outputs.push(out.display().to_string());
    m.extra.insert("synth_config".into(), serde_json::to_value(&cfg).unwrap_or_default());
    m.finish(out, started)
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Config(_) | TrainError::Data(_) => EXIT_USAGE,
        TrainError::NonFinite { .. } => EXIT_TRAIN_ABORT,
        _ => EXIT_ERROR,
    }
}

fn train_err(e: TrainError) -> Failure {
    Failure::new(train_code(&e), e)
}

struct TrainArgs {
    stage: u8,
    config: Option<PathBuf>,
    data: PathBuf,
    ckpt: Option<PathBuf>,
    resume: bool,
    seed: Option<u64>,
    ar_steps: Option<usize>,
}

fn train(args: TrainArgs, out: &Path, started: Instant) -> CliResult<()> {
    if args.stage == 2 && args.ckpt.is_none() {
        return Err(Failure::usage("stage 2 needs a stage-1 checkpoint (--ckpt)"));
    }
    if args.resume && args.ckpt.is_none() {
        return Err(Failure::usage("--resume needs --ckpt"));
    }
    let text = match &args.config {
        Some(p) => Some(read_config(p)?),
        None => None,
    };
    let mut cfg = match &text {
        Some(t) => TrainConfig::from_toml(t).map_err(train_err)?,
        None => TrainConfig::default(),
    };
    cfg.stage = args.stage;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.ar_steps {
        cfg.ar_steps = n;
    }
    cfg.validate().map_err(train_err)?;

    let ds = Dataset::read(&args.data)
        .with_context(|| format!("cannot read dataset {}", args.data.display()))
        .code(EXIT_ERROR)?;
    let archive = match &args.ckpt {
        Some(p) => Some(
            Archive::read(p)
                .with_context(|| format!("cannot read checkpoint {}", p.display()))
                .code(EXIT_ERROR)?,
        ),
        None => None,
    };
    let (start, end) = train_window(&cfg).map_err(train_err)?;
    // A continued run keeps the normalization it started with.
    let stats = match archive.as_ref().and_then(|a| a.meta.get("norm_stats")).and_then(|v| v.as_str()) {
        Some(text) => NormStats::from_text(text).code(EXIT_ERROR)?,
        None => training_stats(&ds, start, end).map_err(train_err)?,
    };
    let data = TrainData::from_dataset(&ds, &stats, start, end).map_err(train_err)?;
    let init = match archive {
        None => TrainInit::Fresh,
        Some(a) if args.resume => TrainInit::Resume(a),
        Some(a) => TrainInit::FineTune(a),
    };
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .code(EXIT_ERROR)?;
    let mut trainer = Trainer::new(cfg.clone(), &data, init).map_err(train_err)?;
    log::info!(
        "stage {} training: {} samples, {} steps, {} parameters",
        cfg.stage,
        trainer.n_samples(),
        trainer.total_steps(),
        trainer.net.n_params()
    );
    let logs = trainer.run(Some(out)).map_err(train_err)?;

    let mut m = RunManifest::new("train", text.as_deref(), cfg.seed);
    m.inputs.push(args.data.display().to_string());
    if let Some(p) = &args.ckpt {
        m.inputs.push(p.display().to_string());
    }
    m.outputs.push(out.join("latest.ckpt").display().to_string());
    m.outputs.push(out.join("metrics.csv").display().to_string());
    m.extra.insert("train_config".into(), serde_json::to_value(&cfg).unwrap_or_default());
    m.extra.insert("steps".into(), trainer.step.into());
    if let Some(last) = logs.last() {
        m.extra.insert("final_loss".into(), last.loss.into());
    }
    m.finish(out, started)
}

fn forecast_code(e: &ForecastError) -> u8 {
    match e {
        ForecastError::NonFinite(_) => EXIT_NUMERIC,
        ForecastError::Horizon(..) | ForecastError::Grid(_) => EXIT_USAGE,
        _ => EXIT_ERROR,
    }
}

fn resolve_init(ds: &Dataset, init: Option<&str>) -> CliResult<usize> {
    let Some(s) = init else {
        return if ds.is_empty() {
            Err(Failure::usage("dataset has no states"))
        } else {
            Ok(0)
        };
    };
    if let Ok(k) = s.parse::<usize>() {
        return if k < ds.len() {
            Ok(k)
        } else {
            Err(Failure::usage(format!("init index {k} out of range (dataset has {} states)", ds.len())))
        };
    }
    let t: DateTime<Utc> = parse_time(s).code(EXIT_USAGE)?;
    ds.index_of(&t)
        .ok_or_else(|| Failure::usage(format!("no state at {}", format_time(&t))))
}

fn forecast(ckpt: &Path, data: &Path, init: Option<&str>, horizon: usize, out: &Path, started: Instant) -> CliResult<()> {
    if horizon == 0 || horizon > MAX_HORIZON_HOURS {
        return Err(Failure::usage(format!("--horizon must be in 1..={MAX_HORIZON_HOURS}")));
    }
    let archive = Archive::read(ckpt)
        .with_context(|| format!("cannot read checkpoint {}", ckpt.display()))
        .code(EXIT_ERROR)?;
    let ckpt_hash = sha256_file(ckpt).code(EXIT_ERROR)?;
    let forecaster = Forecaster::from_checkpoint(&archive).map_err(|e| Failure::new(forecast_code(&e), e))?;
    let ds = Dataset::read(data)
        .with_context(|| format!("cannot read dataset {}", data.display()))
        .code(EXIT_ERROR)?;
    let k = resolve_init(&ds, init)?;
    let conditions = GridConditions::for_dataset(&ds).code(EXIT_USAGE)?;
    let init_state = &ds.states[k];
    let fc = forecaster
        .forecast(init_state, &ds.grid, &ds.registry, &conditions, horizon)
        .map_err(|e| Failure::new(forecast_code(&e), e))?;
    log::info!("{} model evaluations for {horizon} h", fc.model_evaluations);

    let mut outds = Dataset::new(ds.grid.clone(), ds.registry.clone());
    outds.states = fc.states;
    outds.norm_provenance = format!("checkpoint {ckpt_hash}");
    let init_time = format_time(&init_state.timestamp);
    outds.config.insert("forecast.init_time".into(), init_time.clone());
    outds.config.insert("forecast.horizon_hours".into(), horizon.to_string());
    outds.config.insert("forecast.checkpoint_sha256".into(), ckpt_hash.clone());
    outds.config.insert("forecast.model_evaluations".into(), fc.model_evaluations.to_string());
    outds.write(out).code(EXIT_ERROR)?;

    let seed = archive
        .meta
        .get("train")
        .and_then(|t| t.get("seed"))
        .and_then(|s| s.as_u64())
        .unwrap_or(0);
    let args = format!("ckpt={ckpt_hash}\ninit={init_time}\nhorizon={horizon}\n");
    let mut m = RunManifest::new("forecast", Some(&args), seed);
    m.inputs.push(ckpt.display().to_string());
    m.inputs.push(data.display().to_string());
    m.outputs.push(out.display().to_string());
    m.extra.insert("init_time".into(), init_time.into());
    m.extra.insert("horizon_hours".into(), horizon.into());
    m.extra.insert("checkpoint_sha256".into(), ckpt_hash.into());
    m.extra.insert("model_evaluations".into(), fc.model_evaluations.into());
    m.finish(out, started)
}
