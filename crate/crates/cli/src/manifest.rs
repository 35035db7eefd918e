use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliResult, ExitCodeExt, EXIT_ERROR};

pub const MANIFEST_NAME: &str = "run_manifest.json";

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// sha256 of the config text, or of the effective arguments when there is no config file.
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub version: String,
    pub started_at: String,
    pub wall_time_s: f64,
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, config_text: Option<&str>, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_hash: hex::encode(Sha256::digest(config_text.unwrap_or("").as_bytes())),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").into(),
            started_at: chrono::Utc::now().to_rfc3339(),
            wall_time_s: 0.0,
            extra: serde_json::Map::new(),
        }
    }

    pub fn finish(mut self, dir: &Path, started: Instant) -> CliResult<()> {
        self.wall_time_s = started.elapsed().as_secs_f64();
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .code(EXIT_ERROR)?;
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, text + "\n")
            .with_context(|| format!("cannot write {}", path.display()))
            .code(EXIT_ERROR)
    }
}
