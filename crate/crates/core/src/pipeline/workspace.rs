use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// Where every stage reads and writes.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub data: PathBuf,
    pub models: PathBuf,
    pub outputs: PathBuf,
    pub reports: PathBuf,
    pub cache: PathBuf,
}

impl Workspace {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self::at(&cfg.paths.workspace, cfg)
    }

    /// Same layout under a different root.
    pub fn at(root: &Path, cfg: &ExperimentConfig) -> Self {
        let p = &cfg.paths;
        Self {
            root: root.to_path_buf(),
            data: root.join(&p.data),
            models: root.join(&p.models),
            outputs: root.join(&p.outputs),
            reports: root.join(&p.reports),
            cache: root.join(&p.cache),
        }
    }

    pub fn create(&self) -> Result<()> {
        for dir in [
            &self.root,
            &self.data,
            &self.models,
            &self.outputs,
            &self.reports,
            &self.cache,
        ] {
            std::fs::create_dir_all(dir)?;
        }
        Ok(())
    }

    pub fn source_dir(&self) -> PathBuf {
        self.data.join("source")
    }

    pub fn patch_dir(&self) -> PathBuf {
        self.data.join("patches")
    }

    pub fn region_dir(&self) -> PathBuf {
        self.data.join("regions")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.data.join("eval")
    }

    pub fn source_manifest(&self) -> PathBuf {
        self.source_dir().join("manifest.json")
    }

    pub fn patch_manifest(&self) -> PathBuf {
        self.patch_dir().join("manifest.json")
    }

    pub fn region_manifest(&self) -> PathBuf {
        self.region_dir().join("manifest.json")
    }

    pub fn eval_manifest(&self) -> PathBuf {
        self.eval_dir().join("manifest.json")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.models.join("classifier_base.tnsr")
    }

    pub fn lora_checkpoint(&self) -> PathBuf {
        self.models.join("classifier_lora.tnsr")
    }

    pub fn refiner_checkpoint(&self) -> PathBuf {
        self.models.join("refiner.tnsr")
    }

    pub fn coarse_raster(&self, slide: &str) -> PathBuf {
        self.outputs.join(format!("{slide}_coarse.png"))
    }

    pub fn refined_raster(&self, slide: &str) -> PathBuf {
        self.outputs.join(format!("{slide}_refined.png"))
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.reports.join("metrics.json")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.reports.join("metrics.csv")
    }

    pub fn distribution_csv(&self) -> PathBuf {
        self.reports.join("class_distribution.csv")
    }

    pub fn figure(&self, slide: &str) -> PathBuf {
        self.reports.join("figures").join(format!("{slide}.png"))
    }

    pub fn summary(&self) -> PathBuf {
        self.reports.join("summary.txt")
    }

    pub fn ledger(&self) -> PathBuf {
        self.root.join("ledger.json")
    }

    /// Path relative to the workspace root, with forward slashes.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }
}

/// Fails with a missing-artifact error unless `path` exists.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    require(path)?;
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Independent seed for a named purpose, derived from the experiment seed.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// A held-out slide stored as image and label PNGs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSlide {
    pub name: String,
    pub image: String,
    pub labels: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub slides: Vec<EvalSlide>,
}

impl EvalManifest {
    pub fn load(path: &Path) -> Result<Self> {
        require(path)?;
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
