//! Per-run record of stages, their inputs and the artifacts they wrote.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const LEDGER_FILE: &str = "ledger.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    /// Inputs and outputs matched the previous run; nothing was recomputed.
    Cached,
    Failed,
    /// An upstream stage failed.
    Skipped,
}

impl StageStatus {
    pub fn ok(self) -> bool {
        matches!(self, StageStatus::Completed | StageStatus::Cached)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub input_hash: String,
    pub outputs: Vec<Artifact>,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl RunLedger {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self { config_hash, seed, stages: Vec::new() }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &StageRecord> {
        self.stages.iter().filter(|s| !s.status.ok())
    }

    pub fn has_failures(&self) -> bool {
        self.failures().next().is_some()
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(LEDGER_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&std::fs::read(path)?)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(LEDGER_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// The earlier record of `name` can stand in for a rerun when its inputs
    /// match and every output is still on disk, unchanged.
    pub fn reusable(&self, dir: &Path, name: &str, input_hash: &str) -> Option<&StageRecord> {
        let s = self.stage(name)?;
        if !s.status.ok() || s.input_hash != input_hash {
            return None;
        }
        let intact = s.outputs.iter().all(|a| hash_file(&dir.join(&a.path)).is_ok_and(|h| h == a.sha256));
        intact.then_some(s)
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(hash_bytes(&std::fs::read(path)?))
}

/// Hash of a stage's identity: its name, its config section and the
/// artifacts of the stages it reads.
pub fn input_hash(name: &str, section: &serde_json::Value, upstream: &[&StageRecord]) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update([0]);
    h.update(section.to_string().as_bytes());
    for s in upstream {
        h.update([0]);
        h.update(s.name.as_bytes());
        for a in &s.outputs {
            h.update([1]);
            h.update(a.path.as_bytes());
            h.update(a.sha256.as_bytes());
        }
    }
    hex::encode(h.finalize())
}
