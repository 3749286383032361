//! Output directory, CSV/JSON writers and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use delayfolio::delay_sde::fmt_f64;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::SeedSource;
use crate::failure::Failure;

pub const MANIFEST: &str = "manifest.json";

/// Tracks files written and phase timings for the manifest.
pub struct Sink {
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl Sink {
    pub fn new(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            timings_ms: BTreeMap::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn timed<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        *self.timings_ms.entry(label.to_string()).or_default() += t0.elapsed().as_secs_f64() * 1e3;
        out
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Numeric table with 17 significant digits.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<(), Failure> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r.iter().map(|&x| fmt_f64(x)))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Table whose cells are already formatted.
    pub fn csv_text(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), Failure> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
pub struct Versions {
    pub delayfolio: &'static str,
    pub config_schema: u32,
}

#[derive(Serialize)]
pub struct ManifestOverrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub workers: Option<usize>,
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub seed_source: Option<SeedSource>,
    pub overrides: ManifestOverrides,
    pub versions: Versions,
    pub outputs: Vec<String>,
    pub timings_ms: BTreeMap<String, f64>,
    pub status: &'static str,
    pub exit_code: i32,
    pub error: Option<ManifestError>,
}

#[derive(Serialize)]
pub struct ManifestError {
    pub kind: &'static str,
    pub message: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(manifest).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)
}
