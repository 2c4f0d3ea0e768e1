//! Run manifest: config hash, versions, file checksums and stage timings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::LabConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub system_hash: String,
    pub versions: BTreeMap<String, String>,
    /// Paths relative to the run directory, `/`-separated.
    pub files: BTreeMap<String, FileEntry>,
    pub stages: Vec<StageTiming>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<FileEntry> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileEntry {
        sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
        bytes: bytes.len() as u64,
    })
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

impl RunManifest {
    pub fn new(cfg: &LabConfig) -> Self {
        let versions = BTreeMap::from([
            ("ddmlab".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("ddm-core".to_string(), ddm_core::VERSION.to_string()),
            ("checkpoint".to_string(), "DDL1".to_string()),
        ]);
        Self {
            config_hash: format!("{:016x}", cfg.hash()),
            system_hash: format!("{:016x}", cfg.system_hash()),
            versions,
            files: BTreeMap::new(),
            stages: Vec::new(),
        }
    }

    /// The manifest on disk when it describes the same system, else a fresh one.
    pub fn open(run_dir: &Path, cfg: &LabConfig) -> anyhow::Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let fresh = Self::new(cfg);
        if !path.exists() {
            return Ok(fresh);
        }
        let old: Self = serde_json::from_str(&std::fs::read_to_string(&path)?)
            .with_context(|| format!("parsing {}", path.display()))?;
        if old.system_hash != fresh.system_hash {
            return Ok(fresh);
        }
        Ok(Self {
            config_hash: fresh.config_hash,
            versions: fresh.versions,
            ..old
        })
    }

    pub fn record_stage(&mut self, stage: &str, seconds: f64) {
        self.stages.retain(|s| s.stage != stage);
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds,
        });
    }

    pub fn add_files(&mut self, run_dir: &Path, paths: &[PathBuf]) -> anyhow::Result<()> {
        for p in paths {
            self.files.insert(relative(run_dir, p), sha256_file(p)?);
        }
        Ok(())
    }

    pub fn save(&self, run_dir: &Path) -> anyhow::Result<PathBuf> {
        let path = run_dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(run_dir: &Path) -> anyhow::Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Files that are missing or whose checksum changed.
    pub fn verify(&self, run_dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter_map(|(rel, entry)| match sha256_file(&run_dir.join(rel)) {
                Ok(now) if now == *entry => None,
                Ok(_) => Some(format!("{rel}: checksum mismatch")),
                Err(_) => Some(format!("{rel}: missing")),
            })
            .collect()
    }
}
