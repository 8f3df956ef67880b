//! Run manifests: every command records its inputs, outputs, and content
//! hashes so a rerun can be checked for byte-identical artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use milcal::Result;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub elapsed_ms: u128,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

/// Collects hashes while a command runs, then writes the manifest.
pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<FileHash>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::Value::Null,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) -> Result<()> {
        self.config = serde_json::to_value(cfg)?;
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Register an output path; it is hashed when the manifest is written.
    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(self, manifest_path: &Path) -> Result<RunManifest> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            version: 1,
            command: self.command,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs,
            elapsed_ms: self.started.elapsed().as_millis(),
        };
        fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}
