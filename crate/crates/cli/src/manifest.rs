use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::Serialize;

/// Provenance record written next to the outputs of a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_paths: Vec<PathBuf>,
    pub input_paths: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
    pub output_paths: Vec<PathBuf>,
    pub library_version: String,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config_paths: Vec::new(),
            input_paths: Vec::new(),
            seeds: Vec::new(),
            started_at: unix_now(),
            finished_at: 0.0,
            output_paths: Vec::new(),
            library_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// `<out>.manifest.json`, or `manifest.json` inside an output directory.
    pub fn path_for(output: &Path) -> PathBuf {
        if output.is_dir() {
            output.join("manifest.json")
        } else {
            let mut p = output.as_os_str().to_owned();
            p.push(".manifest.json");
            PathBuf::from(p)
        }
    }

    pub fn finish(mut self, primary_output: &Path) -> Result<PathBuf> {
        self.finished_at = unix_now();
        let path = Self::path_for(primary_output);
        pin_core::persist::write_atomic(&path, serde_json::to_string_pretty(&self)?.as_bytes())?;
        Ok(path)
    }
}
