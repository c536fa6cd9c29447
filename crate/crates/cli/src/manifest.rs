//! Run manifests: what a command read, wrote and was configured with.

use anyhow::{Context, Result};
use helix_core::volume::write_json;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub threads: usize,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: f64,
    pub wall_seconds: f64,
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileDigest { path: path.to_owned(), sha256: sha256_hex(&bytes) })
}

/// Collects a manifest while a command runs.
pub struct Recorder {
    manifest: RunManifest,
    start: Instant,
    phase: Instant,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        Recorder {
            manifest: RunManifest {
                command: command.to_owned(),
                argv: std::env::args().collect(),
                version: env!("CARGO_PKG_VERSION").to_owned(),
                threads: rayon::current_num_threads(),
                config_hash: String::new(),
                config: Value::Null,
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_unix: started,
                wall_seconds: 0.0,
                timings: BTreeMap::new(),
            },
            start: Instant::now(),
            phase: Instant::now(),
        }
    }

    pub fn config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        let value = serde_json::to_value(config)?;
        self.manifest.config_hash = sha256_hex(serde_json::to_string(&value)?.as_bytes());
        self.manifest.config = value;
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.to_owned(), seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.push(digest_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.manifest.outputs.push(digest_file(path)?);
        Ok(())
    }

    /// Records the time since the previous phase under `name`.
    pub fn phase(&mut self, name: &str) {
        let now = Instant::now();
        *self.manifest.timings.entry(name.to_owned()).or_insert(0.0) += (now - self.phase).as_secs_f64();
        self.phase = now;
    }

    pub fn finish(mut self, path: &Path) -> Result<RunManifest> {
        self.manifest.wall_seconds = self.start.elapsed().as_secs_f64();
        write_json(path, &self.manifest).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}

/// Manifest location for an output: inside it when it is a directory,
/// `<file>.run.json` otherwise.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join(MANIFEST_FILE)
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".run.json");
        PathBuf::from(s)
    }
}
