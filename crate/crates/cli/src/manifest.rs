use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct OutputRecord {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Provenance record written once per command invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<OutputRecord>,
    pub wall_clock_seconds: f64,
    /// SHA-256 over the sorted `path\0sha256\n` lines of all outputs.
    pub content_hash: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        if !self.seeds.contains(&seed) {
            self.seeds.push(seed);
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Hashes every output and writes the manifest to `path`.
    pub fn finish(self, path: &Path) -> Result<RunManifest> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for p in &self.outputs {
            let rel = p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/");
            outputs.push(OutputRecord {
                path: rel,
                sha256: sha256_file(p)?,
                bytes: fs::metadata(p)?.len(),
            });
        }
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let mut h = Sha256::new();
        for o in &outputs {
            h.update(o.path.as_bytes());
            h.update([0]);
            h.update(o.sha256.as_bytes());
            h.update(b"\n");
        }
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            content_hash: format!("{:x}", h.finalize()),
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}
