use crate::{CliError, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Patient-level train/test assignment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Patients whose data could not be generated, with the reason.
    pub excluded: BTreeMap<String, String>,
}

impl Split {
    pub fn contains(&self, id: &str) -> bool {
        self.train.iter().chain(&self.test).any(|p| p == id)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    /// Patients the stage read (training) or produced output for.
    pub patients: Vec<String>,
    /// Per-patient failures that did not stop the stage.
    pub failures: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub split: Option<Split>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub(crate) fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("kbp".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("volume_format".to_string(), kbp_core::volume::VOLUME_VERSION.to_string());
        Self { config_hash, versions, split: None, stages: BTreeMap::new() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CliError::Io { context: format!("reading {}", path.display()), source })?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("corrupt manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        crate::pipeline::write_file(path, text.as_bytes())
    }

    /// The manifest with every timestamp zeroed, for comparing runs.
    pub fn without_timestamps(&self) -> Self {
        let mut m = self.clone();
        for r in m.stages.values_mut() {
            r.started_unix = 0;
            r.finished_unix = 0;
        }
        m
    }

    /// Check that no training stage read a test patient.
    pub fn audit_split(&self) -> Result<()> {
        let Some(split) = &self.split else { return Ok(()) };
        let test: BTreeSet<&String> = split.test.iter().collect();
        for (stage, rec) in &self.stages {
            if stage.starts_with("train:") {
                if let Some(p) = rec.patients.iter().find(|p| test.contains(p)) {
                    return Err(CliError::Failure(format!("{stage} used test patient {p}")));
                }
            }
        }
        Ok(())
    }
}
