use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl InputFile {
    pub fn new(role: &str, path: &Path) -> Result<Self> {
        Ok(Self {
            role: role.into(),
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Default, Serialize)]
pub struct Timings {
    pub load_seconds: f64,
    pub train_seconds: f64,
    pub write_seconds: f64,
}

/// Everything needed to repeat a run: the resolved configuration, input
/// hashes, stream layout and the files written.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub rng: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    pub stream: serde_json::Value,
    pub reports: Vec<String>,
    pub checkpoints: Vec<String>,
    pub timings: Timings,
}

impl RunManifest {
    /// Writes the manifest after checking that every referenced file exists.
    pub fn write(&self, path: &Path) -> Result<()> {
        for f in self.reports.iter().chain(&self.checkpoints) {
            anyhow::ensure!(Path::new(f).is_file(), "manifest references missing file {f}");
        }
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").with_context(|| format!("cannot write {}", path.display()))
    }
}
