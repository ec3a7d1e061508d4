use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub status: StepStatus,
    pub artifacts: Vec<ArtifactRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub dataset: u64,
    pub train: u64,
    pub eval_stream: u64,
    pub study: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub steps: BTreeMap<String, StepRecord>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> CliResult<(String, u64)> {
    let bytes = std::fs::read(path)?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

impl RunManifest {
    pub fn new(config_hash: String, seeds: Seeds) -> Self {
        let t = now_unix();
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seeds,
            created_unix: t,
            updated_unix: t,
            steps: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> CliResult<Option<Self>> {
        let p = dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
    }

    pub fn save(&mut self, dir: &Path) -> CliResult<()> {
        self.updated_unix = now_unix();
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn is_valid(&self, step: &str) -> bool {
        self.steps.get(step).is_some_and(|s| s.status == StepStatus::Valid)
    }

    /// Every artifact of every valid step, in step order.
    pub fn artifacts(&self) -> impl Iterator<Item = (&str, &ArtifactRecord)> {
        self.steps
            .iter()
            .filter(|(_, s)| s.status == StepStatus::Valid)
            .flat_map(|(n, s)| s.artifacts.iter().map(move |a| (n.as_str(), a)))
    }
}
