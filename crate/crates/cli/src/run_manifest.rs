//! Per-run provenance record written next to each command's main output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::{CliResult, Classify};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
}

pub struct RunRecorder {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    started: Instant,
    started_unix: u64,
}

/// Hex SHA-256 of a file, or of the sorted `(relative path, file hash)`
/// listing for a directory.
pub fn hash_path(path: &Path) -> std::io::Result<String> {
    if path.is_dir() {
        let mut entries = Vec::new();
        collect_files(path, path, &mut entries)?;
        entries.sort();
        let mut h = Sha256::new();
        for (rel, digest) in entries {
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(digest.as_bytes());
            h.update([b'\n']);
        }
        Ok(hex::encode(h.finalize()))
    } else {
        Ok(hex::encode(Sha256::digest(fs::read(path)?)))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.push((rel, hash_path(&path)?));
        }
    }
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunRecorder {
    pub fn start(command: &str, config: &impl Serialize, seed: Option<u64>) -> Self {
        RunRecorder {
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            inputs: Vec::new(),
            started: Instant::now(),
            started_unix: unix_now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Hashes inputs and outputs and writes `<primary>.run.json`.
    pub fn finish(self, primary: &Path, outputs: &[&Path]) -> CliResult<PathBuf> {
        let hash_all = |paths: &mut dyn Iterator<Item = &Path>| -> CliResult<BTreeMap<String, String>> {
            paths
                .filter(|p| p.exists())
                .map(|p| Ok((p.display().to_string(), hash_path(p).input_err(format!("hashing {}", p.display()))?)))
                .collect()
        };
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            input_hashes: hash_all(&mut self.inputs.iter().map(PathBuf::as_path))?,
            output_hashes: hash_all(&mut outputs.iter().copied())?,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let name = format!("{}.run.json", primary.file_name().map_or("out".into(), |n| n.to_string_lossy()));
        let target = primary.with_file_name(name);
        let text = serde_json::to_string_pretty(&manifest).input_err("serializing run manifest")?;
        fs::write(&target, text + "\n").input_err(format!("writing {}", target.display()))?;
        Ok(target)
    }
}
