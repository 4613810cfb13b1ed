//! Per-stage manifests with content hashes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub id: String,
    /// Path relative to the output root.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub git_describe: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub timings_s: BTreeMap<String, f64>,
    pub summary: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

/// `git describe` of the working tree, or "unknown" outside a checkout.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Collects outputs of one stage as they are written.
pub struct StageWriter {
    pub stage: String,
    pub dir: PathBuf,
    outputs: Vec<Artifact>,
    inputs: Vec<Artifact>,
    timings: BTreeMap<String, f64>,
}

impl StageWriter {
    pub fn new(root: &Path, stage: &str) -> Result<Self, CliError> {
        let dir = root.join(stage);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(StageWriter {
            stage: stage.to_string(),
            dir,
            outputs: Vec::new(),
            inputs: Vec::new(),
            timings: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records a file already written inside the stage directory.
    pub fn record(&mut self, id: &str, name: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        self.outputs.push(Artifact {
            id: id.to_string(),
            path: format!("{}/{}", self.stage, name),
            sha256: sha256_file(&path)?,
        });
        Ok(())
    }

    pub fn inputs(&mut self, inputs: Vec<Artifact>) {
        self.inputs.extend(inputs);
    }

    pub fn time(&mut self, what: &str, seconds: f64) {
        *self.timings.entry(what.to_string()).or_insert(0.0) += seconds;
    }

    pub fn finish(mut self, config: &RunConfig, summary: serde_json::Value) -> Result<Manifest, CliError> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            stage: self.stage.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            git_describe: git_describe(),
            seed: config.seed,
            config_hash: config.hash(),
            config: config.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
            timings_s: self.timings,
            summary,
        };
        let path = self.dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

impl Manifest {
    pub fn load(root: &Path, stage: &str) -> Result<Self, CliError> {
        let path = root.join(stage).join(MANIFEST_NAME);
        if !path.exists() {
            return Err(CliError::Artifact {
                id: format!("{stage}/{MANIFEST_NAME}"),
                expected: "a manifest written by the upstream stage".into(),
                reason: format!("{} not found; run `deap {stage}` first", path.display()),
            });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Artifact {
            id: format!("{stage}/{MANIFEST_NAME}"),
            expected: "valid manifest JSON".into(),
            reason: e.to_string(),
        })
    }

    /// Rehashes every listed output; returns them as inputs for the next
    /// stage.
    pub fn verify(&self, root: &Path) -> Result<Vec<Artifact>, CliError> {
        for a in &self.outputs {
            let path = root.join(&a.path);
            if !path.exists() {
                return Err(CliError::Artifact {
                    id: a.id.clone(),
                    expected: a.sha256.clone(),
                    reason: format!("{} is missing", path.display()),
                });
            }
            let got = sha256_file(&path)?;
            if got != a.sha256 {
                return Err(CliError::Artifact {
                    id: a.id.clone(),
                    expected: a.sha256.clone(),
                    reason: format!("{} hashes to {got}", path.display()),
                });
            }
        }
        Ok(self.outputs.clone())
    }

    /// Artifact ids that produced a given kind of file, in manifest order.
    pub fn ids_with_suffix(&self, suffix: &str) -> Vec<String> {
        let mut ids: Vec<String> = self
            .outputs
            .iter()
            .filter(|a| a.path.ends_with(suffix))
            .map(|a| a.id.clone())
            .collect();
        ids.dedup();
        ids
    }
}

/// Loads and verifies an upstream stage in one call.
pub fn upstream(root: &Path, stage: &str) -> Result<(Manifest, Vec<Artifact>), CliError> {
    let m = Manifest::load(root, stage)?;
    let inputs = m.verify(root)?;
    Ok((m, inputs))
}
