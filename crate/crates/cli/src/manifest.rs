use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use acflow::{RewardFn, RunConfig, ToyTaskSpec};
use serde::{Deserialize, Serialize};

use crate::config::config_to_string;
use crate::error::{CliError, Result};
use crate::io::{read, sha256_hex, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of_file(name: &str, path: &Path) -> Result<Self> {
        Ok(Artifact {
            name: name.to_string(),
            path: path.to_path_buf(),
            sha256: sha256_hex(&read(path)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub run_id: String,
    pub command: String,
    /// The effective configuration document, exactly as written to `config.toml`.
    pub config: String,
    pub task: serde_json::Value,
    pub reward: RewardFn,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

pub fn now_unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl ExperimentManifest {
    pub fn new(command: &str, cfg: &RunConfig, task: &ToyTaskSpec, reward: &RewardFn, started: u64) -> Result<Self> {
        let config = config_to_string(cfg)?;
        let run_id = format!("{command}-s{}-{}", cfg.seed, &sha256_hex(config.as_bytes())[..12]);
        Ok(ExperimentManifest {
            run_id,
            command: command.to_string(),
            config,
            task: serde_json::to_value(task).map_err(|e| CliError::Config(e.to_string()))?,
            reward: reward.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix_ms: started,
            finished_unix_ms: started,
        })
    }

    pub fn input(&self, name: &str) -> Option<&Artifact> {
        self.inputs.iter().find(|a| a.name == name)
    }

    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix_ms = now_unix_ms();
        let path = dir.join(MANIFEST_FILE);
        write_json(&path, &self)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read(path)?).map_err(|e| CliError::io(path, e))
    }
}
