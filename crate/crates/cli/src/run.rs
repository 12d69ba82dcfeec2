//! Output directory handling and the per-command run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use vnpose::io;

use crate::error::{bad_input, internal, CliError};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Build identifier printed by `--version` and recorded in manifests.
#[cfg(debug_assertions)]
pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_VERSION"), "+debug");
#[cfg(not(debug_assertions))]
pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_VERSION"), "+release");

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the compact JSON form of `config`.
    pub config_digest: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_seconds: f64,
}

pub fn digest(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json value serialises");
    hex::encode(Sha256::digest(&bytes))
}

/// One command invocation: collects artifacts and writes the manifest last.
pub struct Run {
    command: &'static str,
    out_dir: PathBuf,
    config: serde_json::Value,
    seed: Option<u64>,
    artifacts: Vec<PathBuf>,
    start: Instant,
}

impl Run {
    pub fn new(
        command: &'static str,
        out_dir: &Path,
        config: &impl Serialize,
        seed: Option<u64>,
    ) -> Result<Self, CliError> {
        fs::create_dir_all(out_dir).map_err(bad_input(format!("cannot create {}", out_dir.display())))?;
        Ok(Self {
            command,
            out_dir: out_dir.to_path_buf(),
            config: serde_json::to_value(config).map_err(internal("config"))?,
            seed,
            artifacts: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Records a file written elsewhere.
    pub fn record(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        io::write_atomic(&path, bytes).map_err(internal(format!("writing {}", path.display())))?;
        self.record(path.clone());
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(internal(name.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn finish(self) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_digest: digest(&self.config),
            config: self.config,
            seed: self.seed,
            artifacts: self.artifacts,
            tool_version: BUILD_ID.to_string(),
            wall_seconds: self.start.elapsed().as_secs_f64(),
        };
        let path = self.out_dir.join(MANIFEST_NAME);
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(internal("manifest"))?;
        bytes.push(b'\n');
        io::write_atomic(&path, &bytes).map_err(internal(format!("writing {}", path.display())))?;
        Ok(manifest)
    }
}
