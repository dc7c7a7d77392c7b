//! Run manifests: enough to re-run a command and get the same outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the binary name, minus `--config` and `--manifest`.
    pub args: Vec<String>,
    /// The configuration file as loaded, so replay does not depend on the
    /// file still existing.
    pub config: Config,
    /// Effective settings after flags, file and defaults were merged.
    pub settings: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    /// Wall-clock field; ignored when comparing runs.
    pub elapsed_ms: f64,
}

/// SHA-256 of a file, or of every file under a directory in path order.
pub fn hash_path(path: &Path) -> Result<String, CliError> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect(path, &mut files)?;
        files.sort();
        for f in files {
            h.update(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
            h.update(std::fs::read(&f).map_err(|e| CliError::io(&f, e))?);
        }
    } else {
        h.update(std::fs::read(path).map_err(|e| CliError::io(path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    for e in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = e.map_err(|e| CliError::io(dir, e))?.path();
        if p.is_dir() {
            collect(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))
    }
}
