use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::sha256_hex;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Completion record of one stage. Paths are relative to the output
/// directory and use `/` separators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digest of the stage parameters.
    pub params: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn file_digest(root: &Path, rel: &str) -> Result<String> {
    let path = root.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn digest_files<'a>(root: &Path, rels: impl IntoIterator<Item = &'a String>) -> Result<BTreeMap<String, String>> {
    rels.into_iter()
        .map(|r| Ok((r.clone(), file_digest(root, r)?)))
        .collect()
}

pub fn params_digest<T: Serialize>(params: &T) -> String {
    sha256_hex(&serde_json::to_vec(params).expect("stage parameters serialize"))
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            version: crate::VERSION.to_string(),
            stages: BTreeMap::new(),
        }
    }

    /// Read the manifest under `root`, or start a fresh one. Stage records
    /// survive config changes; each stage checks its own parameters.
    pub fn load_or_new(root: &Path, config_hash: &str) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::new(config_hash));
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: RunManifest = serde_json::from_slice(&bytes)?;
        m.config_hash = config_hash.to_string();
        m.version = crate::VERSION.to_string();
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.get(name)
    }

    /// The record of a prerequisite stage, or a dependency error naming it.
    pub fn require(&self, name: &str) -> Result<&StageRecord> {
        self.stages.get(name).ok_or_else(|| Error::Dependency {
            stage: name.to_string(),
            detail: format!("stage `{name}` has not completed; run it first"),
        })
    }

    /// Fresh digests of every output of the named prerequisite stages.
    pub fn inputs_from(&self, root: &Path, stages: &[&str]) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for s in stages {
            let rec = self.require(s)?;
            for rel in rec.outputs.keys() {
                let d = file_digest(root, rel).map_err(|_| Error::Dependency {
                    stage: s.to_string(),
                    detail: format!("output {rel} is missing; rerun `{s}`"),
                })?;
                out.insert(rel.clone(), d);
            }
        }
        Ok(out)
    }

    /// True when `name` completed with the same parameters and inputs and all
    /// of its outputs are still on disk unchanged.
    pub fn is_current(&self, root: &Path, name: &str, params: &str, inputs: &BTreeMap<String, String>) -> bool {
        let Some(rec) = self.stages.get(name) else {
            return false;
        };
        rec.params == params
            && &rec.inputs == inputs
            && rec
                .outputs
                .iter()
                .all(|(rel, d)| file_digest(root, rel).map_or(false, |now| &now == d))
    }

    pub fn record(
        &mut self,
        root: &Path,
        name: &str,
        params: String,
        inputs: BTreeMap<String, String>,
        outputs: &[String],
        notes: serde_json::Value,
    ) -> Result<()> {
        let outputs = digest_files(root, outputs)?;
        self.stages.insert(name.to_string(), StageRecord { params, inputs, outputs, notes });
        Ok(())
    }
}
