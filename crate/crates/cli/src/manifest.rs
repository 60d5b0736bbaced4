use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::failure::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation. Its `config` block is itself a valid
/// config file, so `--config manifest.json` replays the run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Value,
    pub seeds: Value,
    pub threads: usize,
    pub outputs: Vec<String>,
    pub metrics: Value,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seeds: Value, threads: usize) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            seeds,
            threads,
            outputs: Vec::new(),
            metrics: Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, Failure> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }
}

/// Writes `contents` to `dir/name` and notes it in `outputs`.
pub fn emit(dir: &Path, name: &str, contents: &str, outputs: &mut Vec<String>) -> Result<(), Failure> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Failure::io(&path, e))?;
    outputs.push(name.to_string());
    Ok(())
}
