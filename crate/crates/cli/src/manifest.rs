use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Complete,
    Aborted,
}

/// Record of one invocation: what was run, with which settings, and what it
/// produced. Artifact paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: Status,
    /// Effective configuration in the `key = value` format.
    pub config: String,
    pub seed: u64,
    pub dataset: String,
    pub data_dir: PathBuf,
    pub tool_version: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub error: Option<String>,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, config: String, seed: u64, dataset: &str, data_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            status: Status::Running,
            config,
            seed,
            dataset: dataset.to_string(),
            data_dir: data_dir.to_path_buf(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: now_unix(),
            finished_unix: None,
            artifacts: BTreeMap::new(),
            error: None,
        }
    }

    pub fn add(&mut self, role: &str, file: impl Into<PathBuf>) {
        self.artifacts.insert(role.to_string(), file.into());
    }

    pub fn finish(&mut self, status: Status, error: Option<String>) {
        self.status = status;
        self.error = error;
        self.finished_unix = Some(now_unix());
    }

    /// A complete manifest must point only at files that exist.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        if self.status != Status::Complete {
            return Ok(());
        }
        for (role, file) in &self.artifacts {
            if !dir.join(file).is_file() {
                bail!("manifest lists {role} artifact {} which does not exist", file.display());
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.verify(dir)?;
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE_NAME);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn artifact(&self, dir: &Path, role: &str) -> Result<PathBuf> {
        match self.artifacts.get(role) {
            Some(file) => Ok(dir.join(file)),
            None => bail!("run in {} has no {role} artifact", dir.display()),
        }
    }
}
