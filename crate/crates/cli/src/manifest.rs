//! Run manifest: config, seeds, versions and per-stage checksums.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{FlatConfig, RunConfig};

pub const FILE: &str = "MANIFEST.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub complete: bool,
    /// Output file name to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: FlatConfig,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
    pub complete: bool,
}

impl Manifest {
    /// The manifest already in `dir`, or a fresh one.
    pub fn open(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        let path = dir.join(FILE);
        let mut m = if path.exists() {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            Manifest {
                tool: "sourcetrace".into(),
                version: String::new(),
                config: FlatConfig::new(),
                seeds: BTreeMap::new(),
                stages: Vec::new(),
                complete: false,
            }
        };
        m.version = env!("CARGO_PKG_VERSION").into();
        m.config = cfg.flat.clone();
        m.seeds = BTreeMap::from([("train".to_string(), cfg.train.seed), ("lissa".to_string(), cfg.solver.lissa.seed)]);
        Ok(m)
    }

    pub fn record(&mut self, dir: &Path, name: &str, outputs: &[String], error: Option<String>) -> Result<()> {
        let mut sums = BTreeMap::new();
        for file in outputs {
            sums.insert(file.clone(), checksum(&dir.join(file))?);
        }
        let rec = StageRecord { name: name.into(), complete: error.is_none(), outputs: sums, error };
        match self.stages.iter_mut().find(|s| s.name == name) {
            Some(s) => *s = rec,
            None => self.stages.push(rec),
        }
        self.complete = self.stages.iter().all(|s| s.complete);
        self.save(dir)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

pub fn checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
