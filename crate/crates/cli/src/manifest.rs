//! Per-command run manifests with content hashes of every artifact.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory when possible.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub dataset: u32,
    pub checkpoint: u32,
    pub manifest: u32,
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub formats: FormatVersions,
    /// The effective configuration after overrides, in config-file syntax.
    pub config: String,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub summary: serde_json::Value,
    pub elapsed_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

pub fn artifact(run_dir: &Path, path: &Path) -> Result<Artifact> {
    let (sha256, bytes) = sha256_file(path)?;
    let shown = path.strip_prefix(run_dir).unwrap_or(path);
    Ok(Artifact {
        path: shown.display().to_string(),
        sha256,
        bytes,
    })
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        gdpo_core::io::atomic_write(path, text.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Artifacts whose current content no longer matches the recorded hash.
    pub fn stale_outputs(&self, run_dir: &Path) -> Vec<PathBuf> {
        self.outputs
            .iter()
            .filter_map(|a| {
                let p = run_dir.join(&a.path);
                match sha256_file(&p) {
                    Ok((h, _)) if h == a.sha256 => None,
                    _ => Some(p),
                }
            })
            .collect()
    }
}
