//! Run manifests: a JSON record of what a command was asked to do and what
//! it produced, rewritten after every checkpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::LossTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    /// The parsed config with every default filled in.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub schedule: Option<serde_json::Value>,
    pub loss_traces: BTreeMap<String, LossTrace>,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<serde_json::Value>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub status: RunStatus,
    pub started: DateTime<Utc>,
    pub updated: DateTime<Utc>,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        let now = Utc::now();
        Self {
            run_id: format!("{command}-{}", now.format("%Y%m%dT%H%M%S%.3fZ")),
            command: command.to_string(),
            config,
            seeds: BTreeMap::new(),
            schedule: None,
            loss_traces: BTreeMap::new(),
            checkpoints: Vec::new(),
            reports: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            status: RunStatus::Running,
            started: now,
            updated: now,
            wall_clock_s: 0.0,
        }
    }

    pub fn latest_checkpoint(&self) -> Option<&Path> {
        self.checkpoints.last().map(PathBuf::as_path)
    }

    /// Records a checkpoint once, keeping insertion order.
    pub fn add_checkpoint(&mut self, path: PathBuf) {
        if !self.checkpoints.contains(&path) {
            self.checkpoints.push(path);
        }
    }

    /// Writes atomically after refreshing `updated`; `elapsed_s` is added to
    /// time from earlier sessions of a resumed run.
    pub fn save(&mut self, path: &Path, elapsed_s: f64) -> Result<()> {
        self.updated = Utc::now();
        self.wall_clock_s = elapsed_s;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
