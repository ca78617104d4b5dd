//! Run manifest: content hashes, seeds, and the config snapshot that
//! make stage resume and determinism checks trustworthy.
//!
//! Wall-clock timings live in a separate `timings.json` so the manifest
//! itself is byte-stable across runs with the same seed.

use crate::error::{Error, Result};
use crate::pipeline::config::PipelineConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub stage: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub master_seed: u64,
    pub folds: usize,
    pub config_sha256: String,
    /// Relative artifact path -> entry; sorted for stable serialization.
    pub entries: BTreeMap<String, ArtifactEntry>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&std::fs::read(path)?))
}

/// Hash of the configuration with the output directory normalized away,
/// so runs into different directories still compare equal.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let mut normalized = cfg.clone();
    normalized.out_dir = PathBuf::from(".");
    sha256_bytes(serde_json::to_string(&normalized).expect("config serializes").as_bytes())
}

impl RunManifest {
    pub fn new(cfg: &PipelineConfig) -> Self {
        RunManifest {
            master_seed: cfg.master_seed,
            folds: cfg.folds,
            config_sha256: config_hash(cfg),
            entries: BTreeMap::new(),
        }
    }

    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    pub fn load(out_dir: &Path) -> Result<Self> {
        let path = Self::path(out_dir);
        let raw = std::fs::read_to_string(&path).map_err(|_| Error::MissingArtifact {
            what: path.display().to_string(),
            produced_by: "all".into(),
        })?;
        serde_json::from_str(&raw).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(Self::path(out_dir), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Records one produced file under its path relative to `out_dir`.
    pub fn record(&mut self, out_dir: &Path, path: &Path, stage: &str, seed: u64) -> Result<()> {
        let rel = path
            .strip_prefix(out_dir)
            .map_err(|_| Error::InvalidConfig(format!("{} outside out dir", path.display())))?
            .to_string_lossy()
            .replace('\\', "/");
        let sha256 = sha256_file(path)?;
        self.entries.insert(rel, ArtifactEntry { sha256, stage: stage.to_string(), seed });
        Ok(())
    }

    /// True when every listed artifact exists and hashes to its
    /// recorded value.
    pub fn artifacts_valid(&self, out_dir: &Path, rel_paths: &[String]) -> bool {
        rel_paths.iter().all(|rel| {
            let Some(entry) = self.entries.get(rel) else {
                return false;
            };
            let path = out_dir.join(rel);
            matches!(sha256_file(&path), Ok(h) if h == entry.sha256)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashing_is_stable_and_ignores_out_dir() {
        let a = PipelineConfig { out_dir: "x".into(), ..Default::default() };
        let b = PipelineConfig { out_dir: "y".into(), ..Default::default() };
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = PipelineConfig { master_seed: 11, ..Default::default() };
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn record_and_validate_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let file = out.join("a/b.txt");
        std::fs::create_dir_all(file.parent().unwrap()).unwrap();
        std::fs::write(&file, "payload").unwrap();
        let cfg = PipelineConfig::default();
        let mut m = RunManifest::new(&cfg);
        m.record(out, &file, "synth", 3).unwrap();
        assert!(m.artifacts_valid(out, &["a/b.txt".into()]));
        std::fs::write(&file, "tampered").unwrap();
        assert!(!m.artifacts_valid(out, &["a/b.txt".into()]));
        m.save(out).unwrap();
        let back = RunManifest::load(out).unwrap();
        assert_eq!(m, back);
    }
}
