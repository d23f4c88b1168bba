//! The per-command run record: resolved config, seed, and digests of every
//! artifact read or written. Timestamps live here and nowhere else.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use kdsrl::data::sha256_hex;
use kdsrl::ExperimentConfig;
use serde_json::{json, Value};

use crate::error::{CliError, Result};

pub struct RunRecord {
    command: &'static str,
    started: u64,
    config: Option<ExperimentConfig>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

impl RunRecord {
    pub fn new(command: &'static str) -> Self {
        RunRecord {
            command,
            started: now(),
            config: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn config(&mut self, cfg: &ExperimentConfig) {
        self.config = Some(cfg.clone());
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let d = digest_file(path)?;
        self.inputs.insert(path.display().to_string(), d);
        Ok(())
    }

    pub fn input_digest(&mut self, name: impl Into<String>, digest: String) {
        self.inputs.insert(name.into(), digest);
    }

    /// Writes `bytes` to `path` and records its digest.
    pub fn write(&mut self, path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
        fs::write(path, bytes.as_ref()).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.output_digest(path, sha256_hex(bytes.as_ref()));
        Ok(())
    }

    pub fn output_digest(&mut self, path: &Path, digest: String) {
        self.outputs.insert(path.display().to_string(), digest);
    }

    pub fn forget_output(&mut self, path: &Path) {
        self.outputs.remove(&path.display().to_string());
    }

    pub fn finish(self, out: &Path) -> Result<PathBuf> {
        let config: Value = match &self.config {
            Some(cfg) => cfg
                .to_text()
                .lines()
                .filter_map(|l| l.split_once(" = "))
                .map(|(k, v)| (k.to_string(), Value::String(v.to_string())))
                .collect::<serde_json::Map<_, _>>()
                .into(),
            None => Value::Null,
        };
        let record = json!({
            "command": self.command,
            "seed": self.config.as_ref().map(|c| c.seed),
            "config": config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self.started,
            "finished": now(),
        });
        let path = out.join(format!("{}.run.json", self.command));
        let text = serde_json::to_string_pretty(&record).expect("json value") + "\n";
        fs::write(&path, text).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}
