use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TOY: &str = r#"
n_lat = 8
n_lon = 16
hours = 72
spinup_hours = 24
"#;

const TRAIN: &str = r#"
batch_size = 2
epochs = 1
steps_per_epoch = 60
learning_rate = 2e-3
schedule = "constant"

[model]
embed_dim = 8
depths = [1, 1, 1]
n_heads = 2
pressure_patch = [2, 2, 2]
surface_patch = [2, 2]
window = [2, 2, 2]
time_embed_dim = 8
lowrank_r = 2
"#;

fn flowcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowcast"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("FLOWCAST_NUM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = flowcast(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn files(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

fn col(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let i = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|x| x.unwrap()[i].to_string()).collect()
}

/// Toy dataset, a stage-1 checkpoint trained on it, and a 12 h forecast.
struct Pipeline {
    dir: TempDir,
}

impl Pipeline {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let p = dir.path();
        let cfg = write(p, "toy.toml", TOY);
        let tcfg = write(p, "train.toml", TRAIN);
        ok(&["gen-data", "--config", s(&cfg), "--seed", "7", "--out", s(&p.join("data"))]);
        ok(&[
            "train", "--stage", "1", "--config", s(&tcfg), "--data", s(&p.join("data")), "--out", s(&p.join("run1")),
        ]);
        ok(&[
            "forecast", "--ckpt", s(&p.join("run1/latest.ckpt")), "--data", s(&p.join("data")), "--init", "6",
            "--horizon", "12", "--out", s(&p.join("fc")),
        ]);
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

#[test]
fn gen_data_is_reproducible_and_writes_a_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    for out in ["a", "b"] {
        ok(&["gen-data", "--config", s(&cfg), "--seed", "7", "--out", s(&dir.path().join(out))]);
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let fa = files(&a, "f32");
    assert_eq!(fa.len(), 73);
    for f in &fa {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(b.join(name)).unwrap(), "{name:?}");
    }
    assert_eq!(
        fs::read(a.join("manifest.txt")).unwrap(),
        fs::read(b.join("manifest.txt")).unwrap()
    );
    let m = manifest(&a);
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config_hash"], manifest(&b)["config_hash"]);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = TempDir::new().unwrap();
    let out = flowcast(&["gen-data", "--config", "/nonexistent/toy.toml", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("toy.toml"));

    let bad = write(dir.path(), "bad.toml", "n_lat = 8\nno_such_key = 1\n");
    let out = flowcast(&["gen-data", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = flowcast(&["train", "--stage", "2", "--data", s(dir.path()), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt"));

    let out = flowcast(&["train", "--stage", "3", "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_jump_amplitude_gives_no_flags_and_injected_jumps_are_flagged() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let cfg = write(p, "toy.toml", TOY);
    for (name, eps) in [("clean", "0"), ("jumpy", "0.3")] {
        let data = p.join(name);
        ok(&["gen-data", "--config", s(&cfg), "--jump-eps", eps, "--out", s(&data)]);
        let out = p.join(format!("{name}-eval"));
        ok(&["evaluate", "--kind", "jumps", "--data", s(&data), "--out", s(&out)]);
        let csv = out.join("jumps.csv");
        let hours = col(&csv, "hour");
        let flags = col(&csv, "flag");
        let flagged: Vec<&str> = hours
            .iter()
            .zip(&flags)
            .filter(|(_, f)| *f == "true")
            .map(|(h, _)| h.as_str())
            .collect();
        if eps == "0" {
            assert!(flagged.is_empty(), "clean data flagged at {flagged:?}");
        } else {
            assert_eq!(flagged.len(), hours.len(), "{flagged:?}");
            assert!(flagged.contains(&"9") && flagged.contains(&"21"));
        }
    }
}

#[test]
fn train_forecast_evaluate_pipeline() {
    let pl = Pipeline::new();

    // Stage 1: 20-step block means of the loss decrease.
    let loss: Vec<f64> = col(&pl.path("run1/metrics.csv"), "loss")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(loss.len(), 60);
    let means: Vec<f64> = loss.chunks(20).map(|c| c.iter().sum::<f64>() / 20.0).collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
    assert!(pl.path("run1/epoch-1.ckpt").exists());
    assert_eq!(manifest(&pl.path("run1"))["command"], "train");

    // Forecast: one file per lead hour and a manifest with the evaluation count.
    let fc = pl.path("fc");
    let states = files(&fc, "f32");
    assert_eq!(states.len(), 12);
    assert!(!fc.join("static.f32").exists());
    let m = manifest(&fc);
    assert_eq!(m["extra"]["horizon_hours"], 12);
    assert_eq!(m["extra"]["model_evaluations"], 12);
    assert_eq!(m["extra"]["init_time"], "2021-01-01T06:00:00Z");
    assert_eq!(m["extra"]["checkpoint_sha256"].as_str().unwrap().len(), 64);
    let text = fs::read_to_string(fc.join("manifest.txt")).unwrap();
    assert!(text.contains("forecast.init_time = 2021-01-01T06:00:00Z"));

    // Same inputs, same bytes.
    let again = pl.path("fc2");
    ok(&[
        "forecast", "--ckpt", s(&pl.path("run1/latest.ckpt")), "--data", s(&pl.path("data")), "--init",
        "2021-01-01T06:00:00Z", "--horizon", "12", "--out", s(&again),
    ]);
    for f in &states {
        assert_eq!(fs::read(f).unwrap(), fs::read(again.join(f.file_name().unwrap())).unwrap());
    }

    // A forecast scored against itself has zero error.
    let out = pl.path("self");
    ok(&["evaluate", "--kind", "rmse", "--forecast", s(&fc), "--data", s(&fc), "--out", s(&out)]);
    let rows = csv_rows(&out.join("rmse.csv"));
    assert_eq!(rows.len(), 12 * 20);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() == 0.0));
    let leads: Vec<usize> = col(&out.join("rmse.csv"), "lead_hour")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!((leads[0], leads[leads.len() - 1]), (1, 12));

    // Against the truth the error is positive.
    let out = pl.path("eval");
    ok(&["evaluate", "--kind", "rmse", "--forecast", s(&fc), "--data", s(&pl.path("data")), "--out", s(&out)]);
    assert!(csv_rows(&out.join("rmse.csv")).iter().all(|r| r[2].parse::<f64>().unwrap() > 0.0));

    for kind in ["spectrum", "energy"] {
        let out = pl.path(kind);
        ok(&["evaluate", "--kind", kind, "--forecast", s(&fc), "--out", s(&out)]);
        let rows = csv_rows(&out.join(format!("{kind}.csv")));
        assert!(!rows.is_empty());
        assert_eq!(manifest(&out)["command"], "evaluate");
    }
    let out = pl.path("z500");
    ok(&["evaluate", "--kind", "spectrum", "--forecast", s(&fc), "--channels", "Z500", "--out", s(&out)]);
    assert_eq!(csv_rows(&out.join("spectrum.csv")).len(), 12 * 9);

    // Missing channel.
    let out = flowcast(&["evaluate", "--kind", "spectrum", "--forecast", s(&fc), "--channels", "Z300", "--out", s(&pl.path("bad"))]);
    assert_eq!(out.status.code(), Some(2));

    // Stage 2 from the stage-1 checkpoint, and resuming stage 1.
    let tcfg = pl.path("train.toml");
    let short = write(pl.dir.path(), "short.toml", &TRAIN.replace("steps_per_epoch = 60", "steps_per_epoch = 2"));
    ok(&[
        "train", "--stage", "2", "--ar-steps", "6", "--config", s(&short), "--data", s(&pl.path("data")), "--ckpt",
        s(&pl.path("run1/latest.ckpt")), "--out", s(&pl.path("run2")),
    ]);
    assert_eq!(csv_rows(&pl.path("run2/metrics.csv")).len(), 2);
    assert_eq!(manifest(&pl.path("run2"))["extra"]["train_config"]["ar_steps"], 6);
    let out = flowcast(&[
        "train", "--stage", "1", "--config", s(&tcfg), "--data", s(&pl.path("data")), "--ckpt",
        s(&pl.path("run2/latest.ckpt")), "--resume", "--out", s(&pl.path("run3")),
    ]);
    assert_eq!(out.status.code(), Some(2), "resume with a different config must be refused");
}

#[test]
fn forecast_horizon_is_capped() {
    let dir = TempDir::new().unwrap();
    let out = flowcast(&[
        "forecast", "--ckpt", "/nonexistent.ckpt", "--data", s(dir.path()), "--horizon", "121", "--out",
        s(&dir.path().join("fc")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn track_on_a_synthetic_vortex() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let cfg = write(
        p,
        "vortex.toml",
        r#"
n_lat = 91
n_lon = 180
include_poles = true
hours = 36
spinup_hours = 12

[vortex]
lat = 20.0
lon = 130.0
dlat = 0.2
dlon = -0.3
amplitude = 1.5e7
radius_km = 400.0
"#,
    );
    let data = p.join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let out = p.join("track");
    ok(&[
        "evaluate", "--kind", "track", "--forecast", s(&data), "--data", s(&data), "--track-lat", "20", "--track-lon",
        "130", "--out", s(&out),
    ]);
    let csv = out.join("track.csv");
    let leads: Vec<i64> = col(&csv, "lead_hour").iter().map(|v| v.parse().unwrap()).collect();
    assert!(leads.len() >= 5, "{leads:?}");
    assert!(leads.windows(2).all(|w| w[1] > w[0]), "{leads:?}");
    assert!(leads.iter().all(|l| l % 6 == 0));
    let dist: Vec<f64> = col(&csv, "distance_km").iter().map(|v| v.parse().unwrap()).collect();
    assert!(dist.iter().all(|&d| d == 0.0));
    let lats: Vec<f64> = col(&csv, "lat").iter().map(|v| v.parse().unwrap()).collect();
    assert!(lats.last().unwrap() > lats.first().unwrap(), "vortex drifts poleward: {lats:?}");

    let out = flowcast(&["evaluate", "--kind", "track", "--forecast", s(&data), "--out", s(&p.join("t2"))]);
    assert_eq!(out.status.code(), Some(2));
}
