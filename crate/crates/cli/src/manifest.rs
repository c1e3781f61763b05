//! Run manifests written next to each command's primary output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Settings;
use crate::io::write_bytes;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: serde_json::Value,
    pub config: Settings,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    /// Digest over the command, config, seeds and input contents.
    pub input_digest: String,
    pub artifacts: Vec<FileDigest>,
    /// Command-specific numbers such as objectives.
    pub results: serde_json::Value,
    /// Not reproducible; ignore when comparing manifests.
    pub wall_time_s: f64,
}

/// Git-style blob digest: SHA-256 of `blob <len>\0` followed by the content.
pub fn blob_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_digest(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileDigest { path: path.display().to_string(), sha256: blob_digest(&bytes) })
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub struct ManifestBuilder {
    pub command: String,
    pub args: serde_json::Value,
    pub config: Settings,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub results: serde_json::Value,
}

impl ManifestBuilder {
    pub fn new(command: &str, args: serde_json::Value, config: &Settings) -> Self {
        Self {
            command: command.into(),
            args,
            config: config.clone(),
            seeds: BTreeMap::new(),
            inputs: vec![],
            artifacts: vec![],
            results: serde_json::Value::Null,
        }
    }

    pub fn build(self, wall_time_s: f64) -> Result<RunManifest> {
        let inputs = self.inputs.iter().map(|p| file_digest(p)).collect::<Result<Vec<_>>>()?;
        let artifacts = self.artifacts.iter().map(|p| file_digest(p)).collect::<Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update(serde_json::to_vec(&self.args)?);
        h.update(serde_json::to_vec(&self.config)?);
        h.update(serde_json::to_vec(&self.seeds)?);
        for d in &inputs {
            h.update(d.sha256.as_bytes());
        }
        Ok(RunManifest {
            command: self.command,
            args: self.args,
            config: self.config,
            seeds: self.seeds,
            inputs,
            input_digest: hex::encode(h.finalize()),
            artifacts,
            results: self.results,
            wall_time_s,
        })
    }
}

pub fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let path = manifest_path(out);
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    write_bytes(&path, &bytes)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}
