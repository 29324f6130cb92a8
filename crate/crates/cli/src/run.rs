//! Run directory layout, artifact hashing and the stage manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use handprobe::RunConfig;

#[derive(Debug, thiserror::Error)]
#[error("missing {path}: run `handprobe {stage}` first")]
pub struct MissingArtifact {
    pub path: PathBuf,
    pub stage: &'static str,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn artifacts(&self) -> PathBuf {
        self.root.join("artifacts")
    }

    pub fn artifact(&self, rel: &str) -> PathBuf {
        self.artifacts().join(rel)
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    /// An artifact produced by `stage`, or an error naming that stage.
    pub fn require(&self, rel: &str, stage: &'static str) -> Result<PathBuf> {
        let path = self.artifact(rel);
        if path.exists() {
            Ok(path)
        } else {
            Err(MissingArtifact { path, stage }.into())
        }
    }

    /// Clears and recreates a stage's artifact directory.
    pub fn fresh_dir(&self, rel: &str) -> Result<PathBuf> {
        let dir = self.artifact(rel);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.root).with_context(|| format!("creating {}", self.root.display()))?;
        fs::write(self.config_path(), cfg.to_flat()).context("writing run config")?;
        Ok(())
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Records a stage with digests of its input and output artifacts.
    pub fn record(&self, stage: &str, seed: u64, cfg: &RunConfig, inputs: &[&str], outputs: &[&str]) -> Result<()> {
        let digest_all = |rels: &[&str]| -> Result<BTreeMap<String, String>> {
            rels.iter()
                .map(|rel| Ok((format!("artifacts/{rel}"), digest_path(&self.artifact(rel))?)))
                .collect()
        };
        let mut manifest = self.load_manifest()?;
        manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                seed,
                config_hash: cfg.hash(),
                inputs: digest_all(inputs)?,
                outputs: digest_all(outputs)?,
            },
        );
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.manifest_path(), text + "\n").context("writing manifest")?;
        Ok(())
    }
}

/// sha256 of a file, or of the sorted `(relative path, file digest)` list of
/// a directory.
pub fn digest_path(path: &Path) -> Result<String> {
    if path.is_file() {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(hex::encode(Sha256::digest(&bytes)));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let d = digest_path(&path.join(&rel))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(d.as_bytes());
        h.update([b'\n']);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
