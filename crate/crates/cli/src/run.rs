//! File access that records what a command read and wrote.

use std::path::{Path, PathBuf};
use std::time::Instant;

use kcal::{KcalError, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: usize,
}

impl FileDigest {
    fn of(path: &Path, bytes: &[u8]) -> Self {
        Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        }
    }
}

/// Written next to the primary output as `<out>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub summary: serde_json::Value,
    pub elapsed_ms: u128,
}

pub struct Run {
    command: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    summary: serde_json::Map<String, serde_json::Value>,
    started: Instant,
}

impl Run {
    pub fn new(command: &'static str, config: &impl Serialize, seed: Option<u64>) -> Self {
        Self {
            command,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Map::new(),
            started: Instant::now(),
        }
    }

    /// Reads a file and records the digest of exactly those bytes.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|source| KcalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.inputs.push(FileDigest::of(path, &bytes));
        Ok(bytes)
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        std::fs::write(path, bytes).map_err(|source| KcalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.outputs.push(FileDigest::of(path, bytes));
        Ok(())
    }

    pub fn write_json(&mut self, path: &Path, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| KcalError::Format(e.to_string()))?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    /// Writes the manifest beside `primary`.
    pub fn finish(self, primary: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            summary: serde_json::Value::Object(self.summary),
            elapsed_ms: self.started.elapsed().as_millis(),
        };
        let path = sibling(primary, "manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| KcalError::Format(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|source| KcalError::Io { path, source })
    }
}

/// `dir/name.ext` -> `dir/name.ext.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
